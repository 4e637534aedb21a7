//! im2col / col2im helpers shared by the convolution and transposed convolution ops.

/// Geometry of a square-kernel 2D convolution mapping `in_h x in_w` to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let padded_h = in_h + 2 * pad;
        let padded_w = in_w + 2 * pad;
        if stride == 0 || padded_h < kernel || padded_w < kernel {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (padded_h - kernel) / stride + 1,
            out_w: (padded_w - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row/column read by kernel tap `(ki, kj)` at output `(oi, oj)`, if inside the image.
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let r = (oi * self.stride + ki) as isize - self.pad as isize;
        let c = (oj * self.stride + kj) as isize - self.pad as isize;
        if r < 0 || c < 0 || r as usize >= self.in_h || c as usize >= self.in_w {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

/// Unfolds one `[channels, in_h, in_w]` image into `[channels*k*k, out_h*out_w]` columns.
pub fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for ch in 0..g.channels {
        let plane = &input[ch * g.in_h * g.in_w..(ch + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        dst[oi * g.out_w + oj] = match g.source(oi, oj, ki, kj) {
                            Some((r, c)) => plane[r * g.in_w + c],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating overlaps.
pub fn col2im(cols: &[f64], g: &ConvGeom, output: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for ch in 0..g.channels {
        let plane = &mut output[ch * g.in_h * g.in_w..(ch + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        if let Some((r, c)) = g.source(oi, oj, ki, kj) {
                            plane[r * g.in_w + c] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}
