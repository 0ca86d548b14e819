//! Attack ("noise") layers placed between encoder and decoder.
//!
//! A [`NoiseSpec`] names one attack instance with its parameters. The same
//! spec is applied during training (through [`apply_with_grad`], which also
//! returns a [`Pullback`] for backpropagation) and during evaluation.

pub mod geometry;
pub mod photometric;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jpeg::{self, JpegCache};
use crate::tensor::{ImageBatch, Real};

pub use geometry::{AffineParams, CropWindow, WarpPlan};
pub use photometric::BlurKernel;

pub const RESCALE_RANGE: (f64, f64) = (0.5, 2.0);
pub const TRANSLATE_RANGE: (f64, f64) = (0.05, 0.5);
pub const ROTATE_RANGE: (f64, f64) = (10.0, 60.0);
pub const SHEAR_RANGE: (f64, f64) = (10.0, 45.0);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 2.0);
pub const CROP_RANGE: (f64, f64) = (0.1, 1.0);
pub const JPEG_QUALITIES: [u8; 4] = [30, 50, 70, 90];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Identity,
    Rescale,
    Translate,
    Rotate,
    Shear,
    Mirror,
    Crop,
    GaussianBlur,
    JpegDiff,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 9] = [
        NoiseKind::Identity,
        NoiseKind::Rescale,
        NoiseKind::Translate,
        NoiseKind::Rotate,
        NoiseKind::Shear,
        NoiseKind::Mirror,
        NoiseKind::Crop,
        NoiseKind::GaussianBlur,
        NoiseKind::JpegDiff,
    ];

    pub const NAMES: [&'static str; 9] = [
        "identity",
        "rescale",
        "translate",
        "rotate",
        "shear",
        "mirror",
        "crop",
        "gaussian_blur",
        "jpeg_diff",
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    /// Name of the swept parameter in robustness curves.
    pub fn parameter_name(self) -> &'static str {
        match self {
            NoiseKind::Identity | NoiseKind::Mirror => "none",
            NoiseKind::Rescale => "factor",
            NoiseKind::Translate => "fraction",
            NoiseKind::Rotate | NoiseKind::Shear => "angle",
            NoiseKind::Crop => "ratio",
            NoiseKind::GaussianBlur => "sigma",
            NoiseKind::JpegDiff => "quality",
        }
    }

    /// Spec of this kind with its single swept parameter set to `value`.
    /// Translate applies `value` to both axes.
    pub fn with_parameter(self, value: f64) -> Result<NoiseSpec> {
        let spec = match self {
            NoiseKind::Identity => NoiseSpec::Identity,
            NoiseKind::Mirror => NoiseSpec::Mirror,
            NoiseKind::Rescale => NoiseSpec::Rescale { factor: value },
            NoiseKind::Translate => NoiseSpec::Translate { dx: value, dy: value },
            NoiseKind::Rotate => NoiseSpec::Rotate { angle: value },
            NoiseKind::Shear => NoiseSpec::Shear { angle: value },
            NoiseKind::Crop => NoiseSpec::Crop { ratio: value },
            NoiseKind::GaussianBlur => NoiseSpec::GaussianBlur { sigma: value },
            NoiseKind::JpegDiff => {
                if value.fract() != 0.0 || !(1.0..=100.0).contains(&value) {
                    return Err(Error::OutOfRange {
                        name: "jpeg quality",
                        value,
                        allowed: "integers in [1, 100]",
                    });
                }
                NoiseSpec::JpegDiff {
                    quality: value as u8,
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match key.as_str() {
            "identity" => NoiseKind::Identity,
            "rescale" | "resize" => NoiseKind::Rescale,
            "translate" => NoiseKind::Translate,
            "rotate" => NoiseKind::Rotate,
            "shear" => NoiseKind::Shear,
            "mirror" | "flip" => NoiseKind::Mirror,
            "crop" => NoiseKind::Crop,
            "gaussian_blur" | "blur" => NoiseKind::GaussianBlur,
            "jpeg_diff" | "jpeg" => NoiseKind::JpegDiff,
            _ => return Err(Error::UnsupportedKind(s.to_string())),
        };
        Ok(kind)
    }
}

/// One attack instance. Serializes as `{kind = "...", <params>}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Identity,
    /// Scale factor per axis.
    Rescale { factor: f64 },
    /// Shift as fractions of width (`dx`) and height (`dy`).
    Translate { dx: f64, dy: f64 },
    /// Degrees, counterclockwise.
    Rotate { angle: f64 },
    /// Degrees; horizontal shear about the center row.
    Shear { angle: f64 },
    Mirror,
    /// Kept area fraction.
    Crop { ratio: f64 },
    GaussianBlur { sigma: f64 },
    JpegDiff { quality: u8 },
}

impl NoiseSpec {
    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseSpec::Identity => NoiseKind::Identity,
            NoiseSpec::Rescale { .. } => NoiseKind::Rescale,
            NoiseSpec::Translate { .. } => NoiseKind::Translate,
            NoiseSpec::Rotate { .. } => NoiseKind::Rotate,
            NoiseSpec::Shear { .. } => NoiseKind::Shear,
            NoiseSpec::Mirror => NoiseKind::Mirror,
            NoiseSpec::Crop { .. } => NoiseKind::Crop,
            NoiseSpec::GaussianBlur { .. } => NoiseKind::GaussianBlur,
            NoiseSpec::JpegDiff { .. } => NoiseKind::JpegDiff,
        }
    }

    /// Checks the constraints every direct call needs (finite values, positive
    /// scales, valid quality). Training ranges are enforced by the samplers.
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be finite, got {v}")))
            }
        };
        match *self {
            NoiseSpec::Identity | NoiseSpec::Mirror => Ok(()),
            NoiseSpec::Rescale { factor } => {
                finite("rescale factor", factor)?;
                if factor <= 0.0 {
                    return Err(Error::OutOfRange {
                        name: "rescale factor",
                        value: factor,
                        allowed: "(0, inf)",
                    });
                }
                Ok(())
            }
            NoiseSpec::Translate { dx, dy } => {
                finite("translate dx", dx)?;
                finite("translate dy", dy)
            }
            NoiseSpec::Rotate { angle } => finite("rotate angle", angle),
            NoiseSpec::Shear { angle } => {
                finite("shear angle", angle)?;
                if angle.abs() >= 90.0 {
                    return Err(Error::OutOfRange {
                        name: "shear angle",
                        value: angle,
                        allowed: "(-90, 90)",
                    });
                }
                Ok(())
            }
            NoiseSpec::Crop { ratio } => geometry::crop_size((1, 1), ratio).map(|_| ()),
            NoiseSpec::GaussianBlur { sigma } => BlurKernel::<f64>::new(sigma).map(|_| ()),
            NoiseSpec::JpegDiff { quality } => jpeg::scale_quant_tables(quality).map(|_| ()),
        }
    }

    /// Checks that the parameters lie in the ranges the training sampler draws from.
    pub fn validate_sampling_range(&self) -> Result<()> {
        let check = |name: &'static str, v: f64, (lo, hi): (f64, f64), allowed| {
            if v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::OutOfRange {
                    name,
                    value: v,
                    allowed,
                })
            }
        };
        self.validate()?;
        match *self {
            NoiseSpec::Rescale { factor } => check("rescale factor", factor, RESCALE_RANGE, "[0.5, 2.0]"),
            NoiseSpec::Translate { dx, dy } => {
                check("translate dx", dx.abs(), TRANSLATE_RANGE, "±[0.05, 0.5]")?;
                check("translate dy", dy.abs(), TRANSLATE_RANGE, "±[0.05, 0.5]")
            }
            NoiseSpec::Rotate { angle } => check("rotate angle", angle.abs(), ROTATE_RANGE, "±[10, 60]"),
            NoiseSpec::Shear { angle } => check("shear angle", angle.abs(), SHEAR_RANGE, "±[10, 45]"),
            NoiseSpec::GaussianBlur { sigma } => check("blur sigma", sigma, BLUR_SIGMA_RANGE, "[0.5, 2.0]"),
            NoiseSpec::Crop { ratio } => check("crop ratio", ratio, CROP_RANGE, "[0.1, 1.0]"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = self.kind().name();
        match *self {
            NoiseSpec::Identity | NoiseSpec::Mirror => write!(f, "{kind}"),
            NoiseSpec::Rescale { factor } => write!(f, "{kind}:factor={factor}"),
            NoiseSpec::Translate { dx, dy } => write!(f, "{kind}:dx={dx},dy={dy}"),
            NoiseSpec::Rotate { angle } | NoiseSpec::Shear { angle } => {
                write!(f, "{kind}:angle={angle}")
            }
            NoiseSpec::Crop { ratio } => write!(f, "{kind}:ratio={ratio}"),
            NoiseSpec::GaussianBlur { sigma } => write!(f, "{kind}:sigma={sigma}"),
            NoiseSpec::JpegDiff { quality } => write!(f, "{kind}:quality={quality}"),
        }
    }
}

/// Parses `kind[:key=value[,key=value...]]`, e.g. `rotate:angle=30` or
/// `jpeg:quality=50`.
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let syntax = |reason: String| Error::SpecSyntax {
            spec: s.to_string(),
            reason,
        };
        let (kind_str, rest) = s.split_once(':').unwrap_or((s, ""));
        let kind: NoiseKind = kind_str.parse()?;
        let mut params: Vec<(String, f64)> = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got `{item}`")))?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| syntax(format!("`{v}` is not a number")))?;
            params.push((k.trim().to_ascii_lowercase(), value));
        }
        let mut take = |names: &[&str]| -> Result<f64> {
            let pos = params
                .iter()
                .position(|(k, _)| names.contains(&k.as_str()))
                .ok_or_else(|| syntax(format!("missing parameter `{}`", names[0])))?;
            Ok(params.remove(pos).1)
        };
        let spec = match kind {
            NoiseKind::Identity => NoiseSpec::Identity,
            NoiseKind::Mirror => NoiseSpec::Mirror,
            NoiseKind::Rescale => NoiseSpec::Rescale {
                factor: take(&["factor", "f"])?,
            },
            NoiseKind::Translate => NoiseSpec::Translate {
                dx: take(&["dx"])?,
                dy: take(&["dy"])?,
            },
            NoiseKind::Rotate => NoiseSpec::Rotate {
                angle: take(&["angle"])?,
            },
            NoiseKind::Shear => NoiseSpec::Shear {
                angle: take(&["angle"])?,
            },
            NoiseKind::Crop => NoiseSpec::Crop {
                ratio: take(&["ratio", "p"])?,
            },
            NoiseKind::GaussianBlur => NoiseSpec::GaussianBlur {
                sigma: take(&["sigma"])?,
            },
            NoiseKind::JpegDiff => {
                let q = take(&["quality", "q"])?;
                if q.fract() != 0.0 || !(1.0..=100.0).contains(&q) {
                    return Err(syntax(format!("quality must be an integer in 1..=100, got {q}")));
                }
                NoiseSpec::JpegDiff { quality: q as u8 }
            }
        };
        if let Some((k, _)) = params.first() {
            return Err(syntax(format!("unknown parameter `{k}` for {kind}")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn signed<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let magnitude = rng.random_range(lo..=hi);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Draws a spec of `kind` from its training range: rescale factor uniform in
/// [0.5, 2]; translate components ±[0.05, 0.5]; rotation ±[10°, 60°]; shear
/// ±[10°, 45°] (random sign, uniform magnitude); blur σ in [0.5, 2]; JPEG
/// quality from {30, 50, 70, 90}; crop ratio in [0.1, 1].
pub fn sample_params<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> NoiseSpec {
    sample_params_with(kind, &JPEG_QUALITIES, rng)
}

/// [`sample_params`] with an explicit set of JPEG qualities.
pub fn sample_params_with<R: Rng + ?Sized>(
    kind: NoiseKind,
    jpeg_qualities: &[u8],
    rng: &mut R,
) -> NoiseSpec {
    match kind {
        NoiseKind::Identity => NoiseSpec::Identity,
        NoiseKind::Mirror => NoiseSpec::Mirror,
        NoiseKind::Rescale => NoiseSpec::Rescale {
            factor: rng.random_range(RESCALE_RANGE.0..=RESCALE_RANGE.1),
        },
        NoiseKind::Translate => NoiseSpec::Translate {
            dx: signed(rng, TRANSLATE_RANGE),
            dy: signed(rng, TRANSLATE_RANGE),
        },
        NoiseKind::Rotate => NoiseSpec::Rotate {
            angle: signed(rng, ROTATE_RANGE),
        },
        NoiseKind::Shear => NoiseSpec::Shear {
            angle: signed(rng, SHEAR_RANGE),
        },
        NoiseKind::Crop => NoiseSpec::Crop {
            ratio: rng.random_range(CROP_RANGE.0..=CROP_RANGE.1),
        },
        NoiseKind::GaussianBlur => NoiseSpec::GaussianBlur {
            sigma: rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1),
        },
        NoiseKind::JpegDiff => {
            let qualities = if jpeg_qualities.is_empty() {
                &JPEG_QUALITIES[..]
            } else {
                jpeg_qualities
            };
            NoiseSpec::JpegDiff {
                quality: qualities[rng.random_range(0..qualities.len())],
            }
        }
    }
}

/// Backward map of one applied attack: takes the gradient of the attacked
/// image and returns the gradient of the attack input.
#[derive(Debug, Clone)]
pub enum Pullback<T> {
    Identity,
    Mirror,
    Warp(WarpPlan<T>),
    Crop {
        window: CropWindow,
        input_size: (usize, usize),
    },
    Blur(BlurKernel<T>),
    Jpeg(Box<JpegCache<T>>),
}

impl<T: Real> Pullback<T> {
    pub fn backward(&self, grad_out: &ImageBatch<T>) -> ImageBatch<T> {
        match self {
            Pullback::Identity => grad_out.clone(),
            Pullback::Mirror => geometry::mirror(grad_out),
            Pullback::Warp(plan) => plan.backward(grad_out),
            Pullback::Crop { window, input_size } => {
                let (n, c, _, _) = grad_out.dim();
                let mut grad = ImageBatch::<T>::zeros((n, c, input_size.0, input_size.1));
                grad.slice_mut(ndarray::s![
                    ..,
                    ..,
                    window.top..window.bottom(),
                    window.left..window.right()
                ])
                .assign(grad_out);
                grad
            }
            Pullback::Blur(kernel) => kernel.backward(grad_out),
            Pullback::Jpeg(cache) => cache.backward(grad_out),
        }
    }
}

/// Applies `spec` to `img`. The random source is only consulted for the crop
/// window position.
pub fn apply<T: Real, R: Rng + ?Sized>(
    spec: &NoiseSpec,
    img: &ImageBatch<T>,
    rng: &mut R,
) -> Result<ImageBatch<T>> {
    match *spec {
        NoiseSpec::Identity => Ok(photometric::identity(img)),
        NoiseSpec::Mirror => Ok(geometry::mirror(img)),
        _ => apply_with_grad(spec, img, rng).map(|(out, _)| out),
    }
}

/// Applies `spec` and returns the attacked image with its pullback.
pub fn apply_with_grad<T: Real, R: Rng + ?Sized>(
    spec: &NoiseSpec,
    img: &ImageBatch<T>,
    rng: &mut R,
) -> Result<(ImageBatch<T>, Pullback<T>)> {
    crate::tensor::ensure_nonempty(img)?;
    spec.validate()?;
    let warp = |plan: WarpPlan<T>| -> Result<(ImageBatch<T>, Pullback<T>)> {
        let out = plan.forward(img)?;
        Ok((out, Pullback::Warp(plan)))
    };
    match *spec {
        NoiseSpec::Identity => Ok((img.clone(), Pullback::Identity)),
        NoiseSpec::Mirror => Ok((geometry::mirror(img), Pullback::Mirror)),
        NoiseSpec::Rescale { factor } => warp(geometry::rescale_plan(img, factor)?),
        NoiseSpec::Translate { dx, dy } => warp(geometry::translate_plan(img, dx, dy)?),
        NoiseSpec::Rotate { angle } => warp(geometry::rotate_plan(img, angle)?),
        NoiseSpec::Shear { angle } => warp(geometry::shear_plan(img, angle)?),
        NoiseSpec::Crop { ratio } => {
            let (_, _, h, w) = img.dim();
            let window = geometry::crop_window((h, w), ratio, rng)?;
            let out = geometry::crop_to(img, window)?;
            Ok((
                out,
                Pullback::Crop {
                    window,
                    input_size: (h, w),
                },
            ))
        }
        NoiseSpec::GaussianBlur { sigma } => {
            let kernel = BlurKernel::new(sigma)?;
            Ok((kernel.forward(img), Pullback::Blur(kernel)))
        }
        NoiseSpec::JpegDiff { quality } => {
            let (out, cache) = jpeg::jpeg_diff_with_cache(img, quality)?;
            Ok((out, Pullback::Jpeg(Box::new(cache))))
        }
    }
}
