use std::sync::Arc;

use crate::autodiff::{RowMix, GATHER_PAD};

/// im2col gather indices for a 3x3, padding-1 convolution over a
/// `(pixels x channels)` feature matrix.
#[derive(Debug)]
pub struct ConvIndex {
    pub index: Arc<Vec<u32>>,
    pub out_h: usize,
    pub out_w: usize,
    pub out_pixels: usize,
}

impl ConvIndex {
    fn new(in_h: usize, in_w: usize, channels: usize, stride: usize) -> Self {
        let out_h = (in_h - 1) / stride + 1;
        let out_w = (in_w - 1) / stride + 1;
        let mut index = Vec::with_capacity(out_h * out_w * 9 * channels);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < in_h && (ix as usize) < in_w;
                        for c in 0..channels {
                            index.push(if inside {
                                ((iy as usize * in_w + ix as usize) * channels + c) as u32
                            } else {
                                GATHER_PAD
                            });
                        }
                    }
                }
            }
        }
        ConvIndex {
            index: Arc::new(index),
            out_h,
            out_w,
            out_pixels: out_h * out_w,
        }
    }
}

/// Precomputed spatial plumbing for one image size and channel width.
#[derive(Debug)]
pub struct Geometry {
    pub conv1: ConvIndex,
    pub conv2: ConvIndex,
    pub conv3: ConvIndex,
    pub full: ConvIndex,
    pub upsample: Arc<RowMix>,
}

impl Geometry {
    pub fn new(height: usize, width: usize, c1: usize, c2: usize) -> Self {
        let conv1 = ConvIndex::new(height, width, 3, 2);
        let conv2 = ConvIndex::new(conv1.out_h, conv1.out_w, c1, 2);
        let conv3 = ConvIndex::new(conv2.out_h, conv2.out_w, c2, 1);
        let full = ConvIndex::new(height, width, 3, 1);
        let upsample = Arc::new(bilinear(conv3.out_h, conv3.out_w, height, width));
        Geometry {
            conv1,
            conv2,
            conv3,
            full,
            upsample,
        }
    }

    pub fn memory_tokens(&self) -> usize {
        self.conv3.out_pixels
    }
}

/// Half-pixel-centered bilinear resampling from `(h, w)` to `(oh, ow)` as a row mix.
pub fn bilinear(h: usize, w: usize, oh: usize, ow: usize) -> RowMix {
    let axis = |src: usize, dst: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut entries = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(h, oh, y);
        for x in 0..ow {
            let (x0, x1, fx) = axis(w, ow, x);
            let mut e: Vec<(u32, f64)> = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = (yy * w + xx) as u32;
                    match e.iter_mut().find(|(i, _)| *i == idx) {
                        Some(slot) => slot.1 += wgt,
                        None => e.push((idx, wgt)),
                    }
                }
            }
            entries.push(e);
        }
    }
    RowMix {
        in_rows: h * w,
        entries,
    }
}
