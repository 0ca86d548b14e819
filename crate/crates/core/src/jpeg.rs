//! Differentiable JPEG approximation.
//!
//! The pipeline mirrors a baseline JPEG round trip without entropy coding:
//! YCbCr conversion, 8×8 orthonormal DCT per channel, division by
//! quality-scaled quantization tables, rounding, dequantization, inverse DCT
//! and the inverse color transform. Hard rounding is replaced by
//! `round(x) + (x - round(x))³`, whose derivative `3(x - round(x))²` is
//! nonzero almost everywhere. No chroma subsampling is applied.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::tensor::{ensure_rgb, ImageBatch, Real};

pub const BLOCK: usize = 8;

/// Annex K luminance table.
pub const BASE_LUMA: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Annex K chrominance table.
pub const BASE_CHROMA: [[u16; 8]; 8] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

// BT.601 full range, as used by JFIF.
const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];
const YCC_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136, -0.714_136],
    [1.0, 1.772, 0.0],
];
const CHROMA_OFFSET: f64 = 0.5;

/// Samples are scaled to `[0, 255]` and centered on the middle of that range
/// before the DCT, so the standard tables apply and mid-gray has a zero DC term.
const SAMPLE_SCALE: f64 = 255.0;
const LEVEL_SHIFT: f64 = 127.5;

/// Round to nearest (half away from zero) plus a cubic correction.
#[inline]
pub fn approx_round<T: Real>(x: T) -> T {
    let r = x.round();
    let d = x - r;
    r + d * d * d
}

/// Derivative of [`approx_round`] away from half-integers.
#[inline]
pub fn approx_round_grad<T: Real>(x: T) -> T {
    let d = x - x.round();
    T::of(3.0) * d * d
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [[u16; 8]; 8],
    pub chroma: [[u16; 8]; 8],
    pub quality: u8,
}

/// Scale the base tables with the usual libjpeg quality convention.
pub fn scale_quant_tables(quality: u8) -> Result<QuantTables> {
    if !(1..=100).contains(&quality) {
        return Err(Error::OutOfRange {
            name: "jpeg quality",
            value: quality as f64,
            allowed: "[1, 100]",
        });
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scale_table = |base: &[[u16; 8]; 8]| {
        let mut out = [[0u16; 8]; 8];
        for (row, base_row) in out.iter_mut().zip(base) {
            for (v, &b) in row.iter_mut().zip(base_row) {
                *v = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
            }
        }
        out
    };
    Ok(QuantTables {
        luma: scale_table(&BASE_LUMA),
        chroma: scale_table(&BASE_CHROMA),
        quality,
    })
}

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let n = BLOCK as f64;
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * i + 1) * k) as f64 * std::f64::consts::PI / (2.0 * n)).cos();
        }
    }
    m
}

fn color_convert<T: Real>(
    img: &ImageBatch<T>,
    matrix: &[[f64; 3]; 3],
    pre_offset: [f64; 3],
    post_offset: [f64; 3],
) -> ImageBatch<T> {
    let (n, _, h, w) = img.dim();
    let mut out = Array4::<T>::zeros((n, 3, h, w));
    let m: Vec<Vec<T>> = matrix.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
    let pre: Vec<T> = pre_offset.iter().map(|&v| T::of(v)).collect();
    let post: Vec<T> = post_offset.iter().map(|&v| T::of(v)).collect();
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                let px = [
                    img[[b, 0, r, c]] - pre[0],
                    img[[b, 1, r, c]] - pre[1],
                    img[[b, 2, r, c]] - pre[2],
                ];
                for ch in 0..3 {
                    out[[b, ch, r, c]] =
                        m[ch][0] * px[0] + m[ch][1] * px[1] + m[ch][2] * px[2] + post[ch];
                }
            }
        }
    }
    out
}

/// Full-range BT.601 transform on unit-range RGB. Chroma is centered on 0.5.
pub fn rgb_to_ycbcr<T: Real>(img: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    ensure_rgb(img)?;
    Ok(color_convert(
        img,
        &RGB_TO_YCC,
        [0.0; 3],
        [0.0, CHROMA_OFFSET, CHROMA_OFFSET],
    ))
}

pub fn ycbcr_to_rgb<T: Real>(img: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    ensure_rgb(img)?;
    Ok(color_convert(
        img,
        &YCC_TO_RGB,
        [0.0, CHROMA_OFFSET, CHROMA_OFFSET],
        [0.0; 3],
    ))
}

/// DCT coefficients of one channel, stored block-major as
/// `(block_rows, block_cols, 8, 8)`, together with the unpadded size.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoeffs<T> {
    pub height: usize,
    pub width: usize,
    pub blocks: Array4<T>,
}

fn padded(v: usize) -> usize {
    v.div_ceil(BLOCK) * BLOCK
}

/// Plane-level transforms shared by the public block API and the pipeline.
struct Dct<T> {
    m: [[T; BLOCK]; BLOCK],
}

impl<T: Real> Dct<T> {
    fn new() -> Self {
        let d = dct_matrix();
        let mut m = [[T::zero(); BLOCK]; BLOCK];
        for k in 0..BLOCK {
            for i in 0..BLOCK {
                m[k][i] = T::of(d[k][i]);
            }
        }
        Dct { m }
    }

    /// In-place blockwise transform of a padded `h × w` plane.
    /// `inverse = false` computes `D X Dᵀ`, `inverse = true` computes `Dᵀ X D`.
    fn blocks(&self, plane: &mut [T], h: usize, w: usize, inverse: bool) {
        let mut tmp = [[T::zero(); BLOCK]; BLOCK];
        let mut blk = [[T::zero(); BLOCK]; BLOCK];
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        blk[i][j] = plane[(by + i) * w + bx + j];
                    }
                }
                // tmp = A · blk with A = D or Dᵀ
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let mut acc = T::zero();
                        for k in 0..BLOCK {
                            let a = if inverse { self.m[k][i] } else { self.m[i][k] };
                            acc = acc + a * blk[k][j];
                        }
                        tmp[i][j] = acc;
                    }
                }
                // blk = tmp · Aᵀ
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let mut acc = T::zero();
                        for k in 0..BLOCK {
                            let a = if inverse { self.m[k][j] } else { self.m[j][k] };
                            acc = acc + tmp[i][k] * a;
                        }
                        plane[(by + i) * w + bx + j] = acc;
                    }
                }
            }
        }
    }
}

fn pad_replicate<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (padded(h), padded(w));
    let mut out = vec![T::zero(); ph * pw];
    for r in 0..ph {
        let sr = r.min(h - 1);
        for c in 0..pw {
            out[r * pw + c] = plane[sr * w + c.min(w - 1)];
        }
    }
    out
}

/// Adjoint of [`pad_replicate`]: padded gradients accumulate onto the edge pixels.
fn pad_replicate_adjoint<T: Real>(grad: &[T], h: usize, w: usize) -> Vec<T> {
    let pw = padded(w);
    let mut out = vec![T::zero(); h * w];
    for r in 0..padded(h) {
        let sr = r.min(h - 1);
        for c in 0..pw {
            let idx = sr * w + c.min(w - 1);
            out[idx] = out[idx] + grad[r * pw + c];
        }
    }
    out
}

fn crop_plane<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let pw = padded(w);
    (0..h)
        .flat_map(|r| plane[r * pw..r * pw + w].iter().copied())
        .collect()
}

fn to_block_major<T: Real>(plane: &[T], ph: usize, pw: usize) -> Array4<T> {
    Array4::from_shape_fn((ph / BLOCK, pw / BLOCK, BLOCK, BLOCK), |(by, bx, i, j)| {
        plane[(by * BLOCK + i) * pw + bx * BLOCK + j]
    })
}

fn from_block_major<T: Real>(blocks: &Array4<T>) -> Vec<T> {
    let (br, bc, _, _) = blocks.dim();
    let pw = bc * BLOCK;
    let mut plane = vec![T::zero(); br * BLOCK * pw];
    for ((by, bx, i, j), &v) in blocks.indexed_iter() {
        plane[(by * BLOCK + i) * pw + bx * BLOCK + j] = v;
    }
    plane
}

/// Orthonormal 8×8 DCT-II of every block. Sizes that are not multiples of 8
/// are replicate-padded first.
pub fn block_dct<T: Real>(channel: &Array2<T>) -> Result<BlockCoeffs<T>> {
    let (h, w) = channel.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty channel".into()));
    }
    let channel = channel.as_standard_layout();
    let mut plane = pad_replicate(channel.as_slice().expect("standard layout"), h, w);
    let (ph, pw) = (padded(h), padded(w));
    Dct::new().blocks(&mut plane, ph, pw, false);
    Ok(BlockCoeffs {
        height: h,
        width: w,
        blocks: to_block_major(&plane, ph, pw),
    })
}

/// Inverse of [`block_dct`], cropped back to the original size.
pub fn block_idct<T: Real>(coeffs: &BlockCoeffs<T>) -> Array2<T> {
    let mut plane = from_block_major(&coeffs.blocks);
    let (br, bc, _, _) = coeffs.blocks.dim();
    let (ph, pw) = (br * BLOCK, bc * BLOCK);
    Dct::new().blocks(&mut plane, ph, pw, true);
    let out = crop_plane(&plane, coeffs.height, coeffs.width);
    Array2::from_shape_vec((coeffs.height, coeffs.width), out).expect("cropped plane size")
}

/// Intermediate values needed to backpropagate through [`jpeg_diff_forward`].
#[derive(Debug, Clone)]
pub struct JpegCache<T> {
    size: (usize, usize),
    /// Quantizer inputs `coefficient / table` per `(batch, channel)` plane.
    scaled: Vec<Vec<T>>,
    /// Whether the output pixel was inside the clamp range.
    unclamped: Array4<bool>,
}

fn table_for(tables: &QuantTables, channel: usize) -> &[[u16; 8]; 8] {
    if channel == 0 {
        &tables.luma
    } else {
        &tables.chroma
    }
}

/// Differentiable JPEG round trip on a batch in `[-1, 1]`.
pub fn jpeg_diff_forward<T: Real>(img: &ImageBatch<T>, quality: u8) -> Result<ImageBatch<T>> {
    Ok(jpeg_diff_with_cache(img, quality)?.0)
}

pub fn jpeg_diff_with_cache<T: Real>(
    img: &ImageBatch<T>,
    quality: u8,
) -> Result<(ImageBatch<T>, JpegCache<T>)> {
    ensure_rgb(img)?;
    let tables = scale_quant_tables(quality)?;
    let (n, _, h, w) = img.dim();
    let (ph, pw) = (padded(h), padded(w));
    let dct = Dct::<T>::new();
    let half = T::of(0.5);
    let scale = T::of(SAMPLE_SCALE);
    let shift = T::of(LEVEL_SHIFT);

    let unit = img.mapv(|v| (v + T::one()) * half);
    let ycc = rgb_to_ycbcr(&unit)?;
    let mut decoded = Array4::<T>::zeros((n, 3, h, w));
    let mut scaled = Vec::with_capacity(n * 3);
    for b in 0..n {
        for ch in 0..3 {
            let plane: Vec<T> = ycc
                .slice(ndarray::s![b, ch, .., ..])
                .iter()
                .map(|&v| v * scale - shift)
                .collect();
            let mut coeffs = pad_replicate(&plane, h, w);
            dct.blocks(&mut coeffs, ph, pw, false);
            let table = table_for(&tables, ch);
            let mut z = Vec::with_capacity(coeffs.len());
            for (idx, c) in coeffs.iter_mut().enumerate() {
                let q = T::of(table[(idx / pw) % BLOCK][idx % BLOCK] as f64);
                let u = *c / q;
                z.push(u);
                *c = approx_round(u) * q;
            }
            dct.blocks(&mut coeffs, ph, pw, true);
            let rec = crop_plane(&coeffs, h, w);
            for (dst, v) in decoded
                .slice_mut(ndarray::s![b, ch, .., ..])
                .iter_mut()
                .zip(rec)
            {
                *dst = (v + shift) / scale;
            }
            scaled.push(z);
        }
    }
    let rgb = ycbcr_to_rgb(&decoded)?;
    let raw = rgb.mapv(|v| v * T::of(2.0) - T::one());
    let (lo, hi) = (-T::one(), T::one());
    let unclamped = raw.mapv(|v| v >= lo && v <= hi);
    let out = raw.mapv(|v| v.max(lo).min(hi));
    Ok((
        out,
        JpegCache {
            size: (h, w),
            scaled,
            unclamped,
        },
    ))
}

impl<T: Real> JpegCache<T> {
    pub fn backward(&self, grad_out: &ImageBatch<T>) -> ImageBatch<T> {
        let (h, w) = self.size;
        let (ph, pw) = (padded(h), padded(w));
        let n = grad_out.dim().0;
        let dct = Dct::<T>::new();
        let scale = T::of(SAMPLE_SCALE);

        // clamp, then x ↦ 2x - 1
        let mut g = grad_out.clone();
        g.zip_mut_with(&self.unclamped, |v, &keep| {
            *v = if keep { *v * T::of(2.0) } else { T::zero() }
        });
        // transpose of the inverse color transform (offsets drop out)
        let g_ycc = color_convert(&g, &transpose(&YCC_TO_RGB), [0.0; 3], [0.0; 3]);
        let mut g_unit_ycc = Array4::<T>::zeros((n, 3, h, w));
        for b in 0..n {
            for ch in 0..3 {
                let z = &self.scaled[b * 3 + ch];
                // (v + shift) / scale
                let plane: Vec<T> = g_ycc
                    .slice(ndarray::s![b, ch, .., ..])
                    .iter()
                    .map(|&v| v / scale)
                    .collect();
                // crop adjoint: zero padding
                let mut grad = vec![T::zero(); ph * pw];
                for r in 0..h {
                    grad[r * pw..r * pw + w].copy_from_slice(&plane[r * w..(r + 1) * w]);
                }
                // inverse DCT adjoint is the forward DCT
                dct.blocks(&mut grad, ph, pw, false);
                for (idx, gv) in grad.iter_mut().enumerate() {
                    // c ↦ approx_round(c / q) · q
                    *gv = *gv * approx_round_grad(z[idx]);
                }
                dct.blocks(&mut grad, ph, pw, true);
                let unpadded = pad_replicate_adjoint(&grad, h, w);
                for (dst, v) in g_unit_ycc
                    .slice_mut(ndarray::s![b, ch, .., ..])
                    .iter_mut()
                    .zip(unpadded)
                {
                    *dst = v * scale;
                }
            }
        }
        let g_unit = color_convert(&g_unit_ycc, &transpose(&RGB_TO_YCC), [0.0; 3], [0.0; 3]);
        g_unit.mapv(|v| v * T::of(0.5))
    }
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}
