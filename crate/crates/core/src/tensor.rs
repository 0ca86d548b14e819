//! Pixel batches and the scalar trait shared by every differentiable layer.
//!
//! All image data is stored as `(batch, channels, height, width)`. Inside the
//! networks and noise layers pixel values live in `[-1, 1]`, so a fill value of
//! zero is mid-gray.

use std::fmt::Debug;

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::Float;

use crate::error::{Error, Result};

/// Rank-4 pixel array `(batch, channels, height, width)`.
pub type ImageBatch<T = f32> = Array4<T>;

/// Lower bound of the normalized pixel range.
pub const PIXEL_MIN: f64 = -1.0;
/// Upper bound of the normalized pixel range.
pub const PIXEL_MAX: f64 = 1.0;

/// Floating point scalar the noise layers are generic over.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

pub(crate) fn ensure_nonempty<T>(img: &ImageBatch<T>) -> Result<()> {
    let (n, c, h, w) = img.dim();
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "image batch must have positive dimensions, got {:?}",
            img.dim()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_rgb<T>(img: &ImageBatch<T>) -> Result<()> {
    ensure_nonempty(img)?;
    if img.dim().1 != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            img.dim().1
        )));
    }
    Ok(())
}

pub fn cast<A: Real, B: Real>(img: &ImageBatch<A>) -> ImageBatch<B> {
    img.mapv(|v| B::of(v.f64()))
}

pub fn clamp_pixels<T: Real>(img: &ImageBatch<T>) -> ImageBatch<T> {
    let (lo, hi) = (T::of(PIXEL_MIN), T::of(PIXEL_MAX));
    img.mapv(|v| v.max(lo).min(hi))
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB, using the normalized pixel range as peak.
pub fn psnr<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> f64 {
    let err = mse(a, b);
    let peak = PIXEL_MAX - PIXEL_MIN;
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / err).log10()
    }
}
