use crate::error::{MdvcError, Result};

/// Quantized latent of one frame: `h * w` tokens of `c` integer channels each,
/// stored token-major (`(r * w + q) * c + ch`), every value in `[-bound, bound]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub bound: i32,
    pub data: Vec<i32>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, bound: i32, data: Vec<i32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(MdvcError::Shape(format!(
                "latent {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|v| v.abs() > bound) {
            return Err(MdvcError::OutOfAlphabet { value: v, bound });
        }
        Ok(Self { h, w, c, bound, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize, bound: i32) -> Self {
        Self {
            h,
            w,
            c,
            bound,
            data: vec![0; h * w * c],
        }
    }

    /// Number of tokens `N = h * w`.
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token(&self, index: usize) -> &[i32] {
        &self.data[index * self.c..(index + 1) * self.c]
    }

    pub fn token_mut(&mut self, index: usize) -> &mut [i32] {
        &mut self.data[index * self.c..(index + 1) * self.c]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Channel-major `[c, h, w]` float copy, the layout the synthesis transform consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.tokens();
        let mut out = vec![0.0; n * self.c];
        for i in 0..n {
            for ch in 0..self.c {
                out[ch * n + i] = self.data[i * self.c + ch] as f64;
            }
        }
        out
    }

    /// Mean squared token value over all elements.
    pub fn energy(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.data.len() as f64
    }
}
