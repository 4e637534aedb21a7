//! RGB frames, raw `rgb24` video files with a JSON sidecar, and the seeded
//! synthetic clip generator used for training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdvcError, Result};

/// An 8-bit RGB frame stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(MdvcError::Shape(format!(
                "{}x{} rgb frame needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Planar `[3, H, W]` samples scaled to `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.pixels();
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + i] = px[ch] as f64 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`Frame::to_planar`], rounding and clamping to `[0, 255]`.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Self {
        let plane = width * height;
        let mut data = vec![0u8; 3 * plane];
        for i in 0..plane {
            for ch in 0..3 {
                data[i * 3 + ch] = (planar[ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Self { width, height, data }
    }

    /// Top-left aligned crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(MdvcError::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} frame",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { width, height, data })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoHeader {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub pixel_format: String,
}

pub const PIXEL_FORMAT: &str = "rgb24";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
}

impl Video {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let (width, height) = match frames.first() {
            Some(f) => (f.width, f.height),
            None => return Err(MdvcError::Config("video has no frames".into())),
        };
        if frames.iter().any(|f| f.width != width || f.height != height) {
            return Err(MdvcError::Shape("frames of one video must share dimensions".into()));
        }
        Ok(Self { width, height, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn header(&self) -> VideoHeader {
        VideoHeader {
            width: self.width,
            height: self.height,
            frame_count: self.frames.len(),
            pixel_format: PIXEL_FORMAT.to_string(),
        }
    }
}

/// Sidecar path for a raw video file: the same path with a `.json` extension.
/// For a directory the sidecar is `header.json` inside it.
pub fn sidecar_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("header.json")
    } else {
        path.with_extension("json")
    }
}

fn read_header(path: &Path) -> Result<VideoHeader> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar)
        .map_err(|e| MdvcError::Config(format!("cannot read sidecar {}: {e}", sidecar.display())))?;
    let header: VideoHeader = serde_json::from_str(&text)?;
    if header.pixel_format != PIXEL_FORMAT {
        return Err(MdvcError::Config(format!(
            "unsupported pixel format `{}`, expected `{PIXEL_FORMAT}`",
            header.pixel_format
        )));
    }
    if header.width == 0 || header.height == 0 {
        return Err(MdvcError::Config("video dimensions must be positive".into()));
    }
    Ok(header)
}

/// Reads a raw video: either one file of concatenated frames with a sidecar
/// `<name>.json`, or a directory holding `header.json` and one `<index>.rgb`
/// file per frame (sorted by file name).
pub fn read_video(path: &Path) -> Result<Video> {
    let header = read_header(path)?;
    let frame_bytes = header.width * header.height * 3;
    let bytes = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rgb"))
            .collect();
        files.sort();
        let mut all = Vec::new();
        for f in files {
            all.extend(fs::read(f)?);
        }
        all
    } else {
        fs::read(path)?
    };
    if bytes.len() != frame_bytes * header.frame_count {
        return Err(MdvcError::Config(format!(
            "raw video holds {} bytes, header declares {} frames of {} bytes",
            bytes.len(),
            header.frame_count,
            frame_bytes
        )));
    }
    let frames = bytes
        .chunks_exact(frame_bytes)
        .map(|c| Frame::new(header.width, header.height, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Video::new(frames)
}

/// Writes `video` as one raw file plus its sidecar.
pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    let mut bytes = Vec::with_capacity(video.frames.len() * video.width * video.height * 3);
    for f in &video.frames {
        bytes.extend_from_slice(&f.data);
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&video.header())?)?;
    Ok(())
}

/// Parameters of the procedural clip generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Number of moving shapes drawn over the background.
    pub shapes: usize,
    /// Largest per-frame displacement in pixels of shapes and background texture.
    pub max_speed: f64,
    /// Amplitude of the translating sinusoidal background texture in `[0, 1]` units.
    pub texture: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 3,
            shapes: 3,
            max_speed: 1.5,
            texture: 0.12,
        }
    }
}

struct Shape {
    round: bool,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    vy: f64,
    vx: f64,
    color: [f64; 3],
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // Coverage of a soft edge: 1 inside, 0 outside, linear over 1.5 pixels.
    ((edge - x) / 1.5 + 0.5).clamp(0.0, 1.0)
}

/// Seeded clip of moving anti-aliased shapes over a translating textured gradient.
pub fn synthetic_video(cfg: &SyntheticConfig, seed: u64) -> Video {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dir_y, dir_x) = angle.sin_cos();
    let freq_y: f64 = rng.random_range(0.05..0.25);
    let freq_x: f64 = rng.random_range(0.05..0.25);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let vel = |rng: &mut ChaCha8Rng| rng.random_range(-cfg.max_speed..=cfg.max_speed);
    let bg_vy = vel(&mut rng);
    let bg_vx = vel(&mut rng);
    let tex_tint = color(&mut rng);
    let shapes: Vec<Shape> = (0..cfg.shapes)
        .map(|_| Shape {
            round: rng.random_bool(0.5),
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            ry: rng.random_range(h * 0.08..h * 0.25),
            rx: rng.random_range(w * 0.08..w * 0.25),
            vy: vel(&mut rng),
            vx: vel(&mut rng),
            color: color(&mut rng),
        })
        .collect();
    let frames = (0..cfg.frames)
        .map(|t| {
            let t = t as f64;
            let mut data = Vec::with_capacity(cfg.width * cfg.height * 3);
            for r in 0..cfg.height {
                for q in 0..cfg.width {
                    let (y, x) = (r as f64 + 0.5, q as f64 + 0.5);
                    let g = (((y - h / 2.0) * dir_y + (x - w / 2.0) * dir_x) / (w.max(h)) + 0.5).clamp(0.0, 1.0);
                    let tex = cfg.texture
                        * ((y - bg_vy * t) * freq_y * std::f64::consts::TAU).sin()
                        * ((x - bg_vx * t) * freq_x * std::f64::consts::TAU + phase).cos();
                    let mut px = [0.0; 3];
                    for ch in 0..3 {
                        px[ch] = c0[ch] * (1.0 - g) + c1[ch] * g + tex * (tex_tint[ch] - 0.5) * 2.0;
                    }
                    for s in &shapes {
                        let cy = (s.cy + s.vy * t).rem_euclid(h + 2.0 * s.ry) - s.ry;
                        let cx = (s.cx + s.vx * t).rem_euclid(w + 2.0 * s.rx) - s.rx;
                        let (dy, dx) = ((y - cy) / s.ry, (x - cx) / s.rx);
                        // Signed distance in pixels, approximated by scaling the normalized distance.
                        let dist = if s.round {
                            ((dy * dy + dx * dx).sqrt() - 1.0) * s.ry.min(s.rx)
                        } else {
                            (dy.abs().max(dx.abs()) - 1.0) * s.ry.min(s.rx)
                        };
                        let a = smoothstep(0.0, dist);
                        for ch in 0..3 {
                            px[ch] = px[ch] * (1.0 - a) + s.color[ch] * a;
                        }
                    }
                    data.extend(px.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
                }
            }
            Frame {
                width: cfg.width,
                height: cfg.height,
                data,
            }
        })
        .collect();
    Video {
        width: cfg.width,
        height: cfg.height,
        frames,
    }
}

/// A clip whose frames are all identical.
pub fn static_video(cfg: &SyntheticConfig, seed: u64) -> Video {
    let still = SyntheticConfig {
        max_speed: 0.0,
        ..cfg.clone()
    };
    synthetic_video(&still, seed)
}
