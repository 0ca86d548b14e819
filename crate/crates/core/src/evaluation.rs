//! Imperceptibility and robustness measurement, the real JPEG codec, and
//! report rendering.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::ImageEncoder;
use ndarray::{s, Array2, ArrayView2};
use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_tensor, tensor_to_image};
use crate::error::{Error, Result};
use crate::message::BitMessage;
use crate::networks::ModelBundle;
use crate::noise::{self, NoiseKind};
use crate::tensor::{ensure_rgb, ImageBatch, PIXEL_MAX, PIXEL_MIN};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.map(|t| t / total)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(plane: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows = Array2::<f64>::from_shape_fn((h, ow), |(y, x)| {
        taps.iter().enumerate().map(|(k, t)| t * plane[[y, x + k]]).sum::<f64>()
    });
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        taps.iter().enumerate().map(|(k, t)| t * rows[[y + k, x]]).sum()
    })
}

fn ssim_plane(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, taps: &[f64; SSIM_WINDOW]) -> f64 {
    let a = a.mapv(|v| v as f64);
    let b = b.mapv(|v| v as f64);
    let range = PIXEL_MAX - PIXEL_MIN;
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mu_a = filter_valid(&a, taps);
    let mu_b = filter_valid(&b, taps);
    let aa = filter_valid(&(&a * &a), taps);
    let bb = filter_valid(&(&b * &b), taps);
    let ab = filter_valid(&(&a * &b), taps);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over batch items and RGB channels: 11×11 Gaussian window with
/// σ = 1.5, windows fully inside the image, K1 = 0.01, K2 = 0.03, dynamic
/// range 2.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    Ok(ssim_per_image(a, b)?.iter().sum::<f64>() / a.dim().0 as f64)
}

/// SSIM of each batch item, averaged over channels.
pub fn ssim_per_image(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    ensure_rgb(a)?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim needs equal shapes, got {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (n, c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    Ok((0..n)
        .map(|i| {
            (0..c)
                .map(|ch| ssim_plane(a.slice(s![i, ch, .., ..]), b.slice(s![i, ch, .., ..]), &taps))
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Fraction of positions where the messages agree.
pub fn bit_accuracy(decoded: &BitMessage, truth: &BitMessage) -> Result<f64> {
    if decoded.len() != truth.len() {
        return Err(Error::Shape(format!(
            "messages have {} and {} bits",
            decoded.len(),
            truth.len()
        )));
    }
    let hits = decoded
        .bits()
        .iter()
        .zip(truth.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean bit accuracy of thresholded soft outputs against 0/1 truth rows.
pub fn batch_bit_accuracy(soft: &Array2<f32>, truth: &Array2<f32>) -> f64 {
    let hits = soft
        .iter()
        .zip(truth.iter())
        .filter(|(&s, &t)| (s >= 0.5) == (t >= 0.5))
        .count();
    hits as f64 / truth.len().max(1) as f64
}

/// Round trip through a baseline JPEG codec (4:4:4) at `quality`, with
/// 8-bit quantization on the way in.
pub fn real_jpeg(img: &ImageBatch, quality: u8) -> Result<ImageBatch> {
    ensure_rgb(img)?;
    if !(1..=100).contains(&quality) {
        return Err(Error::OutOfRange {
            name: "jpeg quality",
            value: quality as f64,
            allowed: "[1, 100]",
        });
    }
    let mut out = ImageBatch::zeros(img.raw_dim());
    for i in 0..img.dim().0 {
        let rgb = tensor_to_image(img, i)?;
        let mut bytes = Vec::new();
        JpegEncoder::new_with_quality(&mut bytes, quality)
            .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image {
                path: PathBuf::from("<memory>"),
                source,
            })?;
        let decoded = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)
            .map_err(|source| Error::Image {
                path: PathBuf::from("<memory>"),
                source,
            })?
            .to_rgb8();
        out.slice_mut(s![i..i + 1, .., .., ..])
            .assign(&image_to_tensor(&decoded));
    }
    Ok(out)
}

/// Applies an evaluation attack. JPEG goes through the real codec.
pub fn apply_attack<R: Rng + ?Sized>(
    spec: &noise::NoiseSpec,
    img: &ImageBatch,
    rng: &mut R,
) -> Result<ImageBatch> {
    match *spec {
        noise::NoiseSpec::JpegDiff { quality } => real_jpeg(img, quality),
        _ => noise::apply(spec, img, rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessCurve {
    pub model_id: String,
    pub kind: NoiseKind,
    pub parameter: String,
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImperceptibilityReport {
    pub model_id: String,
    pub ssim: Vec<f64>,
    pub mean_ssim: f64,
}

fn check_pairs(images: &[ImageBatch], messages: &[BitMessage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("no images given".into()));
    }
    if images.len() != messages.len() {
        return Err(Error::InvalidParameter(format!(
            "{} images but {} messages",
            images.len(),
            messages.len()
        )));
    }
    Ok(())
}

/// Embeds each message, applies `kind` at every grid value, decodes and
/// averages bit accuracy over images. Mirror and identity are a single point
/// at 0. Work is spread over images; each image draws from its own stream of
/// a seed taken from `rng`, so the result does not depend on scheduling.
pub fn attack_sweep<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    kind: NoiseKind,
    grid: &[f64],
    images: &[ImageBatch],
    messages: &[BitMessage],
    model_id: &str,
    rng: &mut R,
) -> Result<RobustnessCurve> {
    check_pairs(images, messages)?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter("attack grid is empty".into()));
    }
    let grid: Vec<f64> = if matches!(kind, NoiseKind::Identity | NoiseKind::Mirror) {
        vec![0.0]
    } else {
        grid.to_vec()
    };
    if grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::InvalidParameter("attack grid must be strictly increasing".into()));
    }
    let specs = grid
        .iter()
        .map(|&v| kind.with_parameter(v))
        .collect::<Result<Vec<_>>>()?;
    let seed: u64 = rng.random();
    let per_image = images
        .par_iter()
        .zip(messages)
        .enumerate()
        .map(|(i, (img, msg))| -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let encoded = bundle.encode(img, msg)?;
            specs
                .iter()
                .map(|spec| {
                    let attacked = apply_attack(spec, &encoded, &mut rng)?;
                    let soft = bundle.decode(&attacked)?;
                    bit_accuracy(&BitMessage::from_soft(soft.row(0)), msg)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy = (0..grid.len())
        .map(|j| per_image.iter().map(|row| row[j]).sum::<f64>() / images.len() as f64)
        .collect();
    Ok(RobustnessCurve {
        model_id: model_id.to_string(),
        kind,
        parameter: kind.parameter_name().to_string(),
        grid,
        accuracy,
        samples: images.len(),
    })
}

/// SSIM between each cover and its watermarked version.
pub fn imperceptibility_report(
    bundle: &ModelBundle,
    images: &[ImageBatch],
    messages: &[BitMessage],
    model_id: &str,
) -> Result<ImperceptibilityReport> {
    check_pairs(images, messages)?;
    let ssim = images
        .par_iter()
        .zip(messages)
        .map(|(img, msg)| ssim(img, &bundle.encode(img, msg)?))
        .collect::<Result<Vec<_>>>()?;
    let mean_ssim = ssim.iter().sum::<f64>() / ssim.len() as f64;
    Ok(ImperceptibilityReport {
        model_id: model_id.to_string(),
        ssim,
        mean_ssim,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

fn curves_csv(curves: &[RobustnessCurve]) -> String {
    let mut out = String::from("model_id,kind,parameter,grid,accuracy,samples\n");
    for c in curves {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.model_id,
            c.kind,
            c.parameter,
            join(&c.grid),
            join(&c.accuracy),
            c.samples
        )
        .expect("string write");
    }
    out
}

fn reports_csv(reports: &[ImperceptibilityReport]) -> String {
    let mut out = String::from("model_id,images,mean_ssim\n");
    for r in reports {
        writeln!(out, "{},{},{}", r.model_id, r.ssim.len(), r.mean_ssim).expect("string write");
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot rendering failed: {e}"))
}

fn draw_curves<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    kind: NoiseKind,
    curves: &[&RobustnessCurve],
) -> std::result::Result<(), String> {
    let (lo, hi) = curves
        .iter()
        .flat_map(|c| c.grid.iter())
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = if hi > lo { 0.0 } else { 0.5 };
    let mut chart = ChartBuilder::on(area)
        .caption(kind.name(), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d((lo - pad)..(hi + pad), 0.0f64..1.0f64)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc(kind.parameter_name())
        .y_desc("bit accuracy")
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, curve) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points: Vec<(f64, f64)> = curve.grid.iter().copied().zip(curve.accuracy.iter().copied()).collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(curve.model_id.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| e.to_string())?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn kinds_in_order(curves: &[RobustnessCurve]) -> Vec<NoiseKind> {
    let mut kinds: Vec<NoiseKind> = curves.iter().map(|c| c.kind).collect();
    kinds.sort_by_key(|k| *k as usize);
    kinds.dedup();
    kinds
}

/// Writes one SVG per attack kind, an overview SVG with every kind, and
/// CSV/JSON tables for curves and imperceptibility reports. Returns the
/// written paths.
pub fn render_report(
    curves: &[RobustnessCurve],
    reports: &[ImperceptibilityReport],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if curves.is_empty() {
        return Err(Error::InvalidParameter("no robustness curves to render".into()));
    }
    for c in curves {
        if c.grid.len() != c.accuracy.len() || c.grid.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "curve {} / {} has mismatched grid and accuracy",
                c.model_id, c.kind
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let kinds = kinds_in_order(curves);
    for &kind in &kinds {
        let path = out_dir.join(format!("robustness_{kind}.svg"));
        let of_kind: Vec<&RobustnessCurve> = curves.iter().filter(|c| c.kind == kind).collect();
        {
            let root = SVGBackend::new(&path, (640, 420)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| plot_err(&path, e))?;
            draw_curves(&root, kind, &of_kind).map_err(|e| plot_err(&path, e))?;
            root.present().map_err(|e| plot_err(&path, e))?;
        }
        written.push(path);
    }

    let overview = out_dir.join("robustness_overview.svg");
    {
        let cols = kinds.len().min(3);
        let rows = kinds.len().div_ceil(cols);
        let root = SVGBackend::new(&overview, (400 * cols as u32, 300 * rows as u32)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&overview, e))?;
        let panels = root.split_evenly((rows, cols));
        for (panel, &kind) in panels.iter().zip(&kinds) {
            let of_kind: Vec<&RobustnessCurve> = curves.iter().filter(|c| c.kind == kind).collect();
            draw_curves(panel, kind, &of_kind).map_err(|e| plot_err(&overview, e))?;
        }
        root.present().map_err(|e| plot_err(&overview, e))?;
    }
    written.push(overview);

    written.push(write(&out_dir.join("robustness.csv"), &curves_csv(curves))?);
    written.push(write(&out_dir.join("robustness.json"), &to_json(&curves))?);
    if !reports.is_empty() {
        written.extend(write_imperceptibility_tables(reports, out_dir)?);
    }
    Ok(written)
}

/// CSV and JSON tables for imperceptibility reports alone.
pub fn write_imperceptibility_tables(
    reports: &[ImperceptibilityReport],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidParameter("no imperceptibility reports to write".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(vec![
        write(&out_dir.join("imperceptibility.csv"), &reports_csv(reports))?,
        write(&out_dir.join("imperceptibility.json"), &to_json(&reports))?,
    ])
}
