//! Non-geometric attacks: identity and Gaussian blur.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::tensor::{ensure_nonempty, ImageBatch, Real};

pub fn identity<T: Clone>(img: &ImageBatch<T>) -> ImageBatch<T> {
    img.clone()
}

/// Normalized 1-D Gaussian taps of width `2·ceil(2σ) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel<T> {
    pub sigma: f64,
    pub taps: Vec<T>,
}

impl<T: Real> BlurKernel<T> {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::OutOfRange {
                name: "blur sigma",
                value: sigma,
                allowed: "(0, inf)",
            });
        }
        let radius = (2.0 * sigma).ceil() as i64;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(BlurKernel {
            sigma,
            taps: raw.into_iter().map(|v| T::of(v / total)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.taps.len()
    }

    fn radius(&self) -> i64 {
        (self.taps.len() / 2) as i64
    }

    /// Separable blur with replicated borders.
    pub fn forward(&self, img: &ImageBatch<T>) -> ImageBatch<T> {
        let horizontal = self.pass(img, Axis::Cols, false);
        self.pass(&horizontal, Axis::Rows, false)
    }

    /// Transposed blur: gradient with respect to the input.
    pub fn backward(&self, grad_out: &ImageBatch<T>) -> ImageBatch<T> {
        let vertical = self.pass(grad_out, Axis::Rows, true);
        self.pass(&vertical, Axis::Cols, true)
    }

    fn pass(&self, img: &ImageBatch<T>, axis: Axis, transpose: bool) -> ImageBatch<T> {
        let (n, c, h, w) = img.dim();
        let img = img.as_standard_layout();
        let src = img.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, h, w));
        let dst = out.as_slice_mut().expect("fresh array");
        let r = self.radius();
        let (len, stride, lines, line_step) = match axis {
            Axis::Cols => (w, 1, h, w),
            Axis::Rows => (h, w, w, 1),
        };
        for (plane, out_plane) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(h * w)) {
            for line in 0..lines {
                let base = line * line_step;
                for i in 0..len {
                    for (k, &tap) in self.taps.iter().enumerate() {
                        let j = (i as i64 + k as i64 - r).clamp(0, len as i64 - 1) as usize;
                        if transpose {
                            // out[i] = Σ tap · in[j]  ⇒  grad_in[j] += tap · grad_out[i]
                            let g = plane[base + i * stride];
                            out_plane[base + j * stride] = out_plane[base + j * stride] + tap * g;
                        } else {
                            out_plane[base + i * stride] =
                                out_plane[base + i * stride] + tap * plane[base + j * stride];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

pub fn gaussian_blur<T: Real>(img: &ImageBatch<T>, sigma: f64) -> Result<ImageBatch<T>> {
    ensure_nonempty(img)?;
    Ok(BlurKernel::new(sigma)?.forward(img))
}
