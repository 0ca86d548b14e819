//! Geometric attacks built on one inverse-mapped bilinear warp.
//!
//! Every warp is linear in the pixel values once its parameters are fixed, so
//! the forward pass precomputes a [`WarpPlan`] (four source taps and weights per
//! output pixel) and the backward pass scatters gradients through the same taps.

use ndarray::{s, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ensure_nonempty, ImageBatch, Real};

/// 2×3 matrix mapping homogeneous output coordinates `(x, y, 1)` (column,
/// row) to source coordinates, plus the value used for samples that fall
/// outside the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub matrix: [[f64; 3]; 2],
    pub fill_value: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            fill_value: 0.0,
        }
    }

    /// Shift content right by `dx` and down by `dy` pixels.
    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams {
            matrix: [[1.0, 0.0, -dx], [0.0, 1.0, -dy]],
            fill_value: 0.0,
        }
    }

    /// Rotation about the center of an `height × width` image. Positive angles
    /// turn content counterclockwise as displayed (rows growing downward).
    pub fn rotation(angle_deg: f64, height: usize, width: usize) -> Self {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        Self::about_center([[cos, -sin], [sin, cos]], height, width)
    }

    /// Horizontal shear about the center row with coefficient `tan(angle)`.
    pub fn shear(angle_deg: f64, height: usize, width: usize) -> Self {
        let t = angle_deg.to_radians().tan();
        Self::about_center([[1.0, -t], [0.0, 1.0]], height, width)
    }

    fn about_center(linear: [[f64; 2]; 2], height: usize, width: usize) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let [[a, b], [c, d]] = linear;
        AffineParams {
            matrix: [
                [a, b, cx - a * cx - b * cy],
                [c, d, cy - c * cx - d * cy],
            ],
            fill_value: 0.0,
        }
    }

    pub fn with_fill(mut self, fill_value: f64) -> Self {
        self.fill_value = fill_value;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.matrix.iter().flatten().all(|v| v.is_finite());
        if !finite || !self.fill_value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "affine parameters must be finite, got {:?} fill {}",
                self.matrix, self.fill_value
            )));
        }
        Ok(())
    }

    /// Source coordinate `(x, y)` for output pixel `(col, row)`.
    #[inline]
    pub fn map(&self, col: f64, row: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * col + m[0][1] * row + m[0][2],
            m[1][0] * col + m[1][1] * row + m[1][2],
        )
    }
}

/// Precomputed bilinear sampling taps for one warp.
#[derive(Debug, Clone)]
pub struct WarpPlan<T> {
    in_size: (usize, usize),
    out_size: (usize, usize),
    taps: Vec<[u32; 4]>,
    weights: Vec<[T; 4]>,
    fill_weight: Vec<T>,
    fill_value: T,
}

impl<T: Real> WarpPlan<T> {
    /// Plan for an affine warp with constant fill outside the source.
    pub fn affine(
        params: &AffineParams,
        in_size: (usize, usize),
        out_size: (usize, usize),
    ) -> Result<Self> {
        params.validate()?;
        check_size(in_size, "input")?;
        check_size(out_size, "output")?;
        let mut plan = Self::empty(in_size, out_size, T::of(params.fill_value));
        for row in 0..out_size.0 {
            for col in 0..out_size.1 {
                let (x, y) = params.map(col as f64, row as f64);
                plan.push_sample(x, y);
            }
        }
        Ok(plan)
    }

    /// Plan for resampling the whole image to `out_size`, using pixel-center
    /// alignment and replicated borders.
    pub fn resize(in_size: (usize, usize), out_size: (usize, usize)) -> Result<Self> {
        check_size(in_size, "input")?;
        check_size(out_size, "output")?;
        let mut plan = Self::empty(in_size, out_size, T::zero());
        let sy = in_size.0 as f64 / out_size.0 as f64;
        let sx = in_size.1 as f64 / out_size.1 as f64;
        let max_y = (in_size.0 - 1) as f64;
        let max_x = (in_size.1 - 1) as f64;
        for row in 0..out_size.0 {
            let y = ((row as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            for col in 0..out_size.1 {
                let x = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                plan.push_sample(x, y);
            }
        }
        Ok(plan)
    }

    fn empty(in_size: (usize, usize), out_size: (usize, usize), fill_value: T) -> Self {
        let n = out_size.0 * out_size.1;
        WarpPlan {
            in_size,
            out_size,
            taps: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            fill_weight: Vec::with_capacity(n),
            fill_value,
        }
    }

    fn push_sample(&mut self, x: f64, y: f64) {
        let (h, w) = (self.in_size.0 as i64, self.in_size.1 as i64);
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f as i64;
        let y0 = y0f as i64;
        let corners = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x0 + 1, fx * (1.0 - fy)),
            (y0 + 1, x0, (1.0 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ];
        let mut taps = [0u32; 4];
        let mut weights = [T::zero(); 4];
        let mut fill = 0.0;
        for (k, &(r, c, wt)) in corners.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            if r >= 0 && r < h && c >= 0 && c < w {
                taps[k] = (r * w + c) as u32;
                weights[k] = T::of(wt);
            } else {
                fill += wt;
            }
        }
        self.taps.push(taps);
        self.weights.push(weights);
        self.fill_weight.push(T::of(fill));
    }

    pub fn out_size(&self) -> (usize, usize) {
        self.out_size
    }

    pub fn forward(&self, img: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        let (n, c, h, w) = img.dim();
        if (h, w) != self.in_size {
            return Err(Error::Shape(format!(
                "warp planned for {:?}, got input {:?}",
                self.in_size,
                (h, w)
            )));
        }
        let img = img.as_standard_layout();
        let (oh, ow) = self.out_size;
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let src = img.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array");
        for (plane, out_plane) in src.chunks_exact(h * w).zip(dst.chunks_exact_mut(oh * ow)) {
            for (p, o) in out_plane.iter_mut().enumerate() {
                let t = &self.taps[p];
                let wt = &self.weights[p];
                *o = wt[0] * plane[t[0] as usize]
                    + wt[1] * plane[t[1] as usize]
                    + wt[2] * plane[t[2] as usize]
                    + wt[3] * plane[t[3] as usize]
                    + self.fill_weight[p] * self.fill_value;
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the warp input given the gradient of its output.
    pub fn backward(&self, grad_out: &ImageBatch<T>) -> ImageBatch<T> {
        let (n, c, oh, ow) = grad_out.dim();
        assert_eq!((oh, ow), self.out_size, "gradient shape mismatch");
        let (h, w) = self.in_size;
        let grad_out = grad_out.as_standard_layout();
        let mut grad_in = Array4::<T>::zeros((n, c, h, w));
        let src = grad_out.as_slice().expect("standard layout");
        let dst = grad_in.as_slice_mut().expect("fresh array");
        for (g_plane, in_plane) in src.chunks_exact(oh * ow).zip(dst.chunks_exact_mut(h * w)) {
            for (p, &g) in g_plane.iter().enumerate() {
                let t = &self.taps[p];
                let wt = &self.weights[p];
                for k in 0..4 {
                    in_plane[t[k] as usize] = in_plane[t[k] as usize] + wt[k] * g;
                }
            }
        }
        grad_in
    }
}

fn check_size(size: (usize, usize), what: &str) -> Result<()> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Shape(format!("{what} size must be positive, got {size:?}")));
    }
    Ok(())
}

fn spatial<T>(img: &ImageBatch<T>) -> (usize, usize) {
    let (_, _, h, w) = img.dim();
    (h, w)
}

/// Warp `img` into an `out_size` canvas through `params`.
pub fn affine_warp<T: Real>(
    img: &ImageBatch<T>,
    params: &AffineParams,
    out_size: (usize, usize),
) -> Result<ImageBatch<T>> {
    ensure_nonempty(img)?;
    WarpPlan::affine(params, spatial(img), out_size)?.forward(img)
}

/// Output size of a rescale by `factor`: `round(factor · size)` per axis.
pub fn rescaled_size(size: (usize, usize), factor: f64) -> (usize, usize) {
    let scale = |v: usize| ((v as f64 * factor).round() as usize).max(1);
    (scale(size.0), scale(size.1))
}

pub(crate) fn rescale_plan<T: Real>(
    img: &ImageBatch<T>,
    factor: f64,
) -> Result<WarpPlan<T>> {
    ensure_nonempty(img)?;
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rescale factor must be positive, got {factor}"
        )));
    }
    let size = spatial(img);
    WarpPlan::resize(size, rescaled_size(size, factor))
}

/// Bilinear rescale. The result keeps its new size.
pub fn rescale<T: Real>(img: &ImageBatch<T>, factor: f64) -> Result<ImageBatch<T>> {
    rescale_plan(img, factor)?.forward(img)
}

pub(crate) fn translate_plan<T: Real>(
    img: &ImageBatch<T>,
    dx_frac: f64,
    dy_frac: f64,
) -> Result<WarpPlan<T>> {
    ensure_nonempty(img)?;
    let (h, w) = spatial(img);
    let params = AffineParams::translation(dx_frac * w as f64, dy_frac * h as f64);
    WarpPlan::affine(&params, (h, w), (h, w))
}

/// Shift content by fractions of the width and height; vacated pixels are 0.
pub fn translate<T: Real>(img: &ImageBatch<T>, dx_frac: f64, dy_frac: f64) -> Result<ImageBatch<T>> {
    translate_plan(img, dx_frac, dy_frac)?.forward(img)
}

pub(crate) fn rotate_plan<T: Real>(img: &ImageBatch<T>, angle_deg: f64) -> Result<WarpPlan<T>> {
    ensure_nonempty(img)?;
    let (h, w) = spatial(img);
    WarpPlan::affine(&AffineParams::rotation(angle_deg, h, w), (h, w), (h, w))
}

/// Rotate about the image center on a canvas of unchanged size.
pub fn rotate<T: Real>(img: &ImageBatch<T>, angle_deg: f64) -> Result<ImageBatch<T>> {
    rotate_plan(img, angle_deg)?.forward(img)
}

pub(crate) fn shear_plan<T: Real>(img: &ImageBatch<T>, angle_deg: f64) -> Result<WarpPlan<T>> {
    ensure_nonempty(img)?;
    if !(angle_deg.abs() < 90.0) {
        return Err(Error::OutOfRange {
            name: "shear angle",
            value: angle_deg,
            allowed: "(-90, 90) degrees",
        });
    }
    let (h, w) = spatial(img);
    WarpPlan::affine(&AffineParams::shear(angle_deg, h, w), (h, w), (h, w))
}

/// Horizontal shear about the center row.
pub fn shear<T: Real>(img: &ImageBatch<T>, angle_deg: f64) -> Result<ImageBatch<T>> {
    shear_plan(img, angle_deg)?.forward(img)
}

/// Left-right flip. Exact, and its own inverse.
pub fn mirror<T: Real>(img: &ImageBatch<T>) -> ImageBatch<T> {
    img.slice(s![.., .., .., ..;-1]).to_owned()
}

/// Window of a crop attack, in input pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }
}

/// Side lengths kept by a crop with area ratio `p`: `round(side · √p)` per axis.
pub fn crop_size(size: (usize, usize), p: f64) -> Result<(usize, usize)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::OutOfRange {
            name: "crop ratio",
            value: p,
            allowed: "(0, 1]",
        });
    }
    let side = |v: usize| ((v as f64 * p.sqrt()).round() as usize).clamp(1, v);
    Ok((side(size.0), side(size.1)))
}

/// Uniformly placed crop window of ratio `p` inside an image of `size`.
pub fn crop_window<R: Rng + ?Sized>(
    size: (usize, usize),
    p: f64,
    rng: &mut R,
) -> Result<CropWindow> {
    let (height, width) = crop_size(size, p)?;
    let top = rng.random_range(0..=size.0 - height);
    let left = rng.random_range(0..=size.1 - width);
    Ok(CropWindow {
        top,
        left,
        height,
        width,
    })
}

pub fn crop_to<T: Real>(img: &ImageBatch<T>, window: CropWindow) -> Result<ImageBatch<T>> {
    let (h, w) = spatial(img);
    if window.bottom() > h || window.right() > w || window.height == 0 || window.width == 0 {
        return Err(Error::Shape(format!(
            "crop window {window:?} does not fit a {h}x{w} image"
        )));
    }
    Ok(img
        .slice(s![
            ..,
            ..,
            window.top..window.bottom(),
            window.left..window.right()
        ])
        .to_owned())
}

/// Random crop keeping an area fraction `p`, returned at its natural size.
pub fn crop<T: Real, R: Rng + ?Sized>(
    img: &ImageBatch<T>,
    p: f64,
    rng: &mut R,
) -> Result<ImageBatch<T>> {
    ensure_nonempty(img)?;
    let window = crop_window(spatial(img), p, rng)?;
    crop_to(img, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((1, 1, h, w), |(_, _, r, c)| (r * w + c) as f64)
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let x = random((2, 3, 9, 7), 1);
        let y = affine_warp(&x, &AffineParams::identity(), (9, 7)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_stays_constant_inside_bounds() {
        let x = Array4::<f64>::from_elem((1, 3, 12, 12), 0.37);
        let params = AffineParams {
            matrix: [[0.8, 0.1, 1.0], [-0.1, 0.9, 1.5]],
            fill_value: 0.0,
        };
        let y = affine_warp(&x, &params, (8, 8)).unwrap();
        for v in y.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let x = ramp(4, 4);
        // translation by +0.5 pixel: out(c) samples in(c - 0.5)
        let y = affine_warp(&x, &AffineParams::translation(0.5, 0.0), (4, 4)).unwrap();
        for r in 0..4 {
            for c in 1..4 {
                let expected = 0.5 * (x[[0, 0, r, c - 1]] + x[[0, 0, r, c]]);
                assert!((y[[0, 0, r, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_matrix_is_rejected() {
        let x = ramp(4, 4);
        let params = AffineParams {
            matrix: [[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]],
            fill_value: 0.0,
        };
        assert!(matches!(
            affine_warp(&x, &params, (4, 4)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn unit_rescale_is_identity() {
        let x = random((1, 3, 10, 13), 2);
        let y = rescale(&x, 1.0).unwrap();
        assert_eq!(y.dim(), x.dim());
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rescale_output_size_rounds() {
        let x = random((1, 1, 10, 15), 3);
        assert_eq!(rescale(&x, 0.5).unwrap().dim(), (1, 1, 5, 8));
        assert_eq!(rescale(&x, 2.0).unwrap().dim(), (1, 1, 20, 30));
        let c = Array4::<f64>::from_elem((1, 2, 5, 5), -0.25);
        assert!(rescale(&c, 2.0).unwrap().iter().all(|v| (v + 0.25).abs() < 1e-12));
        assert!(rescale(&x, 0.0).is_err());
    }

    #[test]
    fn integer_translation_moves_unit_pixel() {
        let mut x = Array4::<f64>::zeros((1, 1, 10, 10));
        x[[0, 0, 4, 2]] = 1.0;
        let y = translate(&x, 0.3, 0.2).unwrap();
        for ((_, _, r, c), v) in y.indexed_iter() {
            let expected = if (r, c) == (6, 5) { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12, "({r},{c}) = {v}");
        }
    }

    #[test]
    fn zero_parameter_attacks_are_identities() {
        let x = random((1, 3, 11, 8), 4);
        assert_eq!(translate(&x, 0.0, 0.0).unwrap(), x);
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
        assert_eq!(shear(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn rotated_constant_keeps_interior_and_fills_corners() {
        let x = Array4::<f64>::from_elem((1, 1, 32, 32), 0.6);
        let y = rotate(&x, 30.0).unwrap();
        assert!((y[[0, 0, 16, 16]] - 0.6).abs() < 1e-12);
        assert!((y[[0, 0, 10, 20]] - 0.6).abs() < 1e-12);
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 31, 31]], 0.0);
    }

    #[test]
    fn rotation_direction_is_counterclockwise_on_screen() {
        // a pixel right of center moves to above center after +90 degrees
        let mut x = Array4::<f64>::zeros((1, 1, 9, 9));
        x[[0, 0, 4, 7]] = 1.0;
        let y = rotate(&x, 90.0).unwrap();
        assert!((y[[0, 0, 1, 4]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shear_fixes_center_row() {
        let mut x = Array4::<f64>::zeros((1, 1, 9, 9));
        x[[0, 0, 4, 6]] = 1.0;
        let y = shear(&x, 30.0).unwrap();
        assert!((y[[0, 0, 4, 6]] - 1.0).abs() < 1e-12);
        assert!((y.sum() - 1.0).abs() < 1e-12);
        assert!(shear(&x, 90.0).is_err());
    }

    #[test]
    fn sheared_constant_fills_wedges() {
        let x = Array4::<f64>::from_elem((1, 1, 16, 16), 1.0);
        let y = shear(&x, 40.0).unwrap();
        assert!((y[[0, 0, 8, 8]] - 1.0).abs() < 1e-12);
        assert_eq!(y[[0, 0, 0, 15]], 0.0);
        assert_eq!(y[[0, 0, 15, 0]], 0.0);
    }

    #[test]
    fn mirror_moves_pixel_and_is_involution() {
        let mut x = Array4::<f64>::zeros((1, 2, 5, 7));
        x[[0, 1, 3, 1]] = 1.0;
        let y = mirror(&x);
        assert_eq!(y[[0, 1, 3, 5]], 1.0);
        assert_eq!(y.sum(), 1.0);
        assert_eq!(mirror(&y), x);
    }

    #[test]
    fn crop_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random((1, 3, 256, 256), 6);
        assert_eq!(crop(&x, 1.0, &mut rng).unwrap(), x);
        assert_eq!(crop(&x, 0.25, &mut rng).unwrap().dim(), (1, 3, 128, 128));
        assert!(crop(&x, 0.0, &mut rng).is_err());
        assert!(crop(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn crop_window_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10_000 {
            let p = 0.01 + 0.99 * (i as f64 / 10_000.0);
            let size = (17 + i % 50, 9 + i % 31);
            let w = crop_window(size, p, &mut rng).unwrap();
            assert!(w.bottom() <= size.0 && w.right() <= size.1);
        }
    }

    #[test]
    fn crop_dimensions_follow_sqrt_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 1..=10 {
            let p = k as f64 / 10.0;
            let w = crop_window((200, 120), p, &mut rng).unwrap();
            assert_eq!(w.height, (200.0 * p.sqrt()).round() as usize);
            assert_eq!(w.width, (120.0 * p.sqrt()).round() as usize);
        }
    }
}
