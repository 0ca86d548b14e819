//! Encoder → noise layer → decoder training with an adversary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, Split, TrainingLoader};
use crate::error::{Error, Result};
use crate::evaluation::{batch_bit_accuracy, ssim};
use crate::message::{self, BitMessage};
use crate::networks::{init_bundle, write_file, ModelBundle, NetConfig};
use crate::nn::{sigmoid, Adam, Grads};
use crate::noise::{self, NoiseKind, NoiseSpec, JPEG_QUALITIES};
use crate::tensor::ImageBatch;

/// Noise layers of the combined regime.
pub const COMBINED_LAYERS: [NoiseKind; 6] = [
    NoiseKind::Rescale,
    NoiseKind::Translate,
    NoiseKind::Rotate,
    NoiseKind::Mirror,
    NoiseKind::GaussianBlur,
    NoiseKind::JpegDiff,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Identity,
    Specialized { layer: NoiseKind },
    Combined {
        #[serde(default = "combined_default")]
        layers: Vec<NoiseKind>,
    },
}

fn combined_default() -> Vec<NoiseKind> {
    COMBINED_LAYERS.to_vec()
}

impl Regime {
    pub fn combined() -> Self {
        Regime::Combined {
            layers: combined_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Regime::Identity => Ok(()),
            Regime::Specialized { layer } => match layer {
                NoiseKind::Identity | NoiseKind::Crop => Err(Error::Config(format!(
                    "`{layer}` is not a trainable specialized layer"
                ))),
                _ => Ok(()),
            },
            Regime::Combined { layers } => {
                let mut sorted: Vec<usize> = layers.iter().map(|k| *k as usize).collect();
                sorted.sort_unstable();
                let mut expected: Vec<usize> = COMBINED_LAYERS.iter().map(|k| *k as usize).collect();
                expected.sort_unstable();
                if sorted != expected {
                    let names: Vec<&str> = COMBINED_LAYERS.iter().map(|k| k.name()).collect();
                    return Err(Error::Config(format!(
                        "combined regime must use exactly [{}]",
                        names.join(", ")
                    )));
                }
                Ok(())
            }
        }
    }

    /// Short identifier used in provenance and reports.
    pub fn id(&self) -> String {
        match self {
            Regime::Identity => "identity".into(),
            Regime::Specialized { layer } => layer.name().into(),
            Regime::Combined { .. } => "combined".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub message: f32,
    pub image: f32,
    pub adversarial: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            message: 1.0,
            image: 0.7,
            adversarial: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset manifest; only read by the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub crop: usize,
    pub regime: Regime,
    pub loss_weights: LossWeights,
    pub jpeg_qualities: Vec<u8>,
    pub network: NetConfig,
    /// Validation period in steps; 0 disables periodic validation.
    pub validate_every: u64,
    pub validation_images: usize,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: None,
            seed: 0,
            steps: 10_000,
            batch_size: 16,
            learning_rate: 1e-3,
            crop: data::DEFAULT_CROP,
            regime: Regime::Identity,
            loss_weights: LossWeights::default(),
            jpeg_qualities: JPEG_QUALITIES.to_vec(),
            network: NetConfig::default(),
            validate_every: 500,
            validation_images: 32,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.regime.validate()?;
        let w = self.loss_weights;
        for (name, v) in [("message", w.message), ("image", w.image), ("adversarial", w.adversarial)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // a half-size rescale must still be decodable
        let min_crop = 2 * crate::networks::MIN_DECODE_SIZE;
        if self.crop < min_crop {
            return Err(Error::Config(format!("crop must be at least {min_crop}")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.jpeg_qualities.is_empty() || self.jpeg_qualities.iter().any(|q| !(1..=100).contains(q)) {
            return Err(Error::Config("jpeg_qualities must be a nonempty list in [1, 100]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Mean squared error between soft outputs and 0/1 bits.
pub fn message_loss(soft: &[f32], truth: &BitMessage) -> Result<f64> {
    if soft.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} soft values for a {}-bit message",
            soft.len(),
            truth.len()
        )));
    }
    Ok(soft
        .iter()
        .zip(truth.bits())
        .map(|(&s, &b)| (s as f64 - b as u8 as f64).powi(2))
        .sum::<f64>()
        / soft.len() as f64)
}

/// Mean squared pixel error.
pub fn image_loss(encoded: &ImageBatch, cover: &ImageBatch) -> Result<f64> {
    if encoded.dim() != cover.dim() {
        return Err(Error::Shape(format!(
            "image loss needs equal shapes, got {:?} and {:?}",
            encoded.dim(),
            cover.dim()
        )));
    }
    Ok(crate::tensor::mse(encoded, cover))
}

fn bce(score: f64, target: f64) -> f64 {
    let p = score.clamp(1e-12, 1.0 - 1e-12);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Discriminator and generator cross-entropies from adversary scores. The
/// discriminator loss averages over all real and fake scores.
pub fn adversarial_losses(score_real: &[f32], score_fake: &[f32]) -> (f64, f64) {
    let n = (score_real.len() + score_fake.len()).max(1) as f64;
    let d = (score_real.iter().map(|&s| bce(s as f64, 0.0)).sum::<f64>()
        + score_fake.iter().map(|&s| bce(s as f64, 1.0)).sum::<f64>())
        / n;
    let g = score_fake.iter().map(|&s| bce(s as f64, 0.0)).sum::<f64>() / score_fake.len().max(1) as f64;
    (d, g)
}

/// log(1 + e^z) without overflow.
fn softplus(z: f32) -> f32 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sample_noise_layer<R: Rng + ?Sized>(regime: &Regime, jpeg_qualities: &[u8], rng: &mut R) -> NoiseSpec {
    match regime {
        Regime::Identity => NoiseSpec::Identity,
        Regime::Specialized { layer } => noise::sample_params_with(*layer, jpeg_qualities, rng),
        Regime::Combined { layers } => {
            let kind = layers[rng.random_range(0..layers.len())];
            noise::sample_params_with(kind, jpeg_qualities, rng)
        }
    }
}

/// Adam states for the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub encoder: Adam,
    pub decoder: Adam,
    pub adversary: Adam,
}

impl Optimizers {
    pub fn new(bundle: &ModelBundle, learning_rate: f32) -> Self {
        Optimizers {
            encoder: Adam::new(&bundle.encoder_params, learning_rate),
            decoder: Adam::new(&bundle.decoder_params, learning_rate),
            adversary: Adam::new(&bundle.adversary_params, learning_rate),
        }
    }

    fn all(&self) -> [&Adam; 3] {
        [&self.encoder, &self.decoder, &self.adversary]
    }

    fn all_mut(&mut self) -> [&mut Adam; 3] {
        [&mut self.encoder, &mut self.decoder, &mut self.adversary]
    }
}

/// Loss terms of one generator pass, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub message: f64,
    pub image: f64,
    /// Absent when the adversarial weight is zero.
    pub generator: Option<f64>,
    pub total: f64,
}

/// Tensors seen during a generator pass, for instrumentation.
pub struct StepTrace<'a> {
    pub cover: &'a ImageBatch,
    pub encoded: &'a ImageBatch,
    pub attacked: &'a ImageBatch,
    pub decoder_input: &'a ImageBatch,
}

pub struct GeneratorPass {
    pub encoder_grads: Grads,
    pub decoder_grads: Grads,
    pub losses: LossParts,
    pub encoded: ImageBatch,
    pub soft: Array2<f32>,
}

/// Forward and backward pass of encoder, noise layer and decoder (plus the
/// adversary's generator term). Batch-norm running statistics are updated in
/// place; parameters are not.
#[allow(clippy::too_many_arguments)]
pub fn generator_pass<R: Rng + ?Sized>(
    bundle: &mut ModelBundle,
    covers: &ImageBatch,
    bits: &Array2<f32>,
    spec: &NoiseSpec,
    weights: LossWeights,
    rng: &mut R,
    hook: Option<&mut dyn FnMut(&StepTrace<'_>)>,
) -> Result<GeneratorPass> {
    let nets = bundle.nets.clone();
    let (encoded, enc_cache) = nets.encoder.forward_train(&mut bundle.encoder_params, covers, bits)?;
    let (attacked, pullback) = noise::apply_with_grad(spec, &encoded, rng)?;
    let decoder_input = &attacked;
    if let Some(hook) = hook {
        hook(&StepTrace {
            cover: covers,
            encoded: &encoded,
            attacked: &attacked,
            decoder_input,
        });
    }
    let (logits, dec_cache) = nets.decoder.forward_train(&mut bundle.decoder_params, decoder_input);
    let soft = logits.mapv(sigmoid);

    let count = soft.len() as f32;
    let msg_loss = soft
        .iter()
        .zip(bits.iter())
        .map(|(&s, &b)| ((s - b) as f64).powi(2))
        .sum::<f64>()
        / count as f64;
    let grad_logits = ndarray::Zip::from(&soft)
        .and(bits)
        .map_collect(|&s, &b| weights.message * 2.0 * (s - b) / count * s * (1.0 - s));

    let img_loss = image_loss(&encoded, covers)?;
    let pixels = encoded.len() as f32;
    let mut grad_encoded = (&encoded - covers) * (weights.image * 2.0 / pixels);

    let mut decoder_grads = bundle.decoder_params.zero_grads();
    let grad_attacked = nets
        .decoder
        .backward(&bundle.decoder_params, &dec_cache, &grad_logits, &mut decoder_grads, true)
        .expect("input grad requested");
    grad_encoded += &pullback.backward(&grad_attacked);

    let mut generator = None;
    if weights.adversarial > 0.0 {
        let (z, adv_cache) = nets.adversary.forward_train(&mut bundle.adversary_params, &encoded);
        let n = z.len() as f32;
        generator = Some(z.iter().map(|&v| softplus(v) as f64).sum::<f64>() / n as f64);
        let grad_z = z.mapv(|v| weights.adversarial * sigmoid(v) / n);
        let mut scratch = bundle.adversary_params.zero_grads();
        grad_encoded += &nets
            .adversary
            .backward(&bundle.adversary_params, &adv_cache, &grad_z, &mut scratch, true)
            .expect("input grad requested");
    }

    let mut encoder_grads = bundle.encoder_params.zero_grads();
    nets.encoder
        .backward(&bundle.encoder_params, &enc_cache, &grad_encoded, &mut encoder_grads, false);

    let total = weights.message as f64 * msg_loss
        + weights.image as f64 * img_loss
        + generator.map_or(0.0, |g| weights.adversarial as f64 * g);
    Ok(GeneratorPass {
        encoder_grads,
        decoder_grads,
        losses: LossParts {
            message: msg_loss,
            image: img_loss,
            generator,
            total,
        },
        encoded,
        soft,
    })
}

/// Cross-entropy of the adversary on covers (label 0) and encoded images
/// (label 1) with its parameter gradients.
fn discriminator_pass(bundle: &mut ModelBundle, covers: &ImageBatch, encoded: &ImageBatch) -> (f64, Grads) {
    let nets = bundle.nets.clone();
    let mut grads = bundle.adversary_params.zero_grads();
    let n = (covers.dim().0 + encoded.dim().0) as f32;
    let mut loss = 0.0;
    for (img, label) in [(covers, 0.0f32), (encoded, 1.0)] {
        let (z, cache) = nets.adversary.forward_train(&mut bundle.adversary_params, img);
        loss += z.iter().map(|&v| (softplus(v) - label * v) as f64).sum::<f64>();
        let grad = z.mapv(|v| (sigmoid(v) - label) / n);
        nets.adversary
            .backward(&bundle.adversary_params, &cache, &grad, &mut grads, false);
    }
    (loss / n as f64, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Validation {
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub noise: String,
    pub message_loss: f64,
    pub image_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generator_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discriminator_loss: Option<f64>,
    pub total_loss: f64,
    /// Bit accuracy on the attacked training batch.
    pub batch_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<Validation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(record_line).collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad log line: {e}"))))
            .collect::<Result<Vec<StepRecord>>>()?;
        if records.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(Error::Config("log steps are not increasing".into()));
        }
        Ok(TrainLog { records })
    }

    pub fn last_validation(&self) -> Option<&Validation> {
        self.records.iter().rev().find_map(|r| r.validation.as_ref())
    }
}

fn record_line(r: &StepRecord) -> String {
    let mut line = serde_json::to_string(r).expect("record serializes");
    line.push('\n');
    line
}

/// One optimizer update of encoder and decoder, then one of the adversary
/// when its weight is positive.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    bundle: &mut ModelBundle,
    optimizers: &mut Optimizers,
    covers: &ImageBatch,
    bits: &Array2<f32>,
    spec: &NoiseSpec,
    weights: LossWeights,
    step: u64,
    rng: &mut R,
    hook: Option<&mut dyn FnMut(&StepTrace<'_>)>,
) -> Result<StepRecord> {
    let pass = generator_pass(bundle, covers, bits, spec, weights, rng, hook)?;
    let losses = pass.losses;
    let finite = losses.total.is_finite()
        && pass.encoder_grads.is_finite()
        && pass.decoder_grads.is_finite();
    if !finite {
        return Err(Error::Divergence {
            step,
            detail: format!(
                "noise {spec}: message {} image {} generator {:?}",
                losses.message, losses.image, losses.generator
            ),
        });
    }
    optimizers.encoder.update(&mut bundle.encoder_params, &pass.encoder_grads);
    optimizers.decoder.update(&mut bundle.decoder_params, &pass.decoder_grads);

    let mut discriminator_loss = None;
    if weights.adversarial > 0.0 {
        let (d, grads) = discriminator_pass(bundle, covers, &pass.encoded);
        if !(d.is_finite() && grads.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("discriminator loss {d}"),
            });
        }
        optimizers.adversary.update(&mut bundle.adversary_params, &grads);
        discriminator_loss = Some(d);
    }
    Ok(StepRecord {
        step,
        noise: spec.to_string(),
        message_loss: losses.message,
        image_loss: losses.image,
        generator_loss: losses.generator,
        discriminator_loss,
        total_loss: losses.total,
        batch_accuracy: batch_bit_accuracy(&pass.soft, bits),
        validation: None,
    })
}

/// Random source for `step`: one stream of the run seed per step, so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Fixed validation images, messages and attack.
struct ValidationSet {
    images: ImageBatch,
    bits: Array2<f32>,
    spec: NoiseSpec,
}

impl ValidationSet {
    fn build(config: &TrainConfig, manifest: &DatasetManifest) -> Result<Option<Self>> {
        let split = if manifest.val.is_empty() { Split::Train } else { Split::Val };
        let items: Vec<ImageBatch> = data::eval_images(manifest, split, config.crop)
            .take(config.validation_images)
            .map(|r| r.map(|(_, img)| img))
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Ok(None);
        }
        let views: Vec<_> = items.iter().map(|i| i.view()).collect();
        let images = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal sizes");
        // stream u64::MAX is never used by a training step
        let mut rng = step_rng(config.seed, u64::MAX);
        let messages: Vec<BitMessage> = (0..items.len())
            .map(|_| BitMessage::random(config.network.message_length, &mut rng))
            .collect();
        let spec = sample_noise_layer(&config.regime, &config.jpeg_qualities, &mut rng);
        Ok(Some(ValidationSet {
            images,
            bits: message::to_array(&messages)?,
            spec,
        }))
    }

    fn evaluate(&self, bundle: &ModelBundle, seed: u64) -> Result<Validation> {
        let encoded = bundle.encode_batch(&self.images, &self.bits)?;
        let clean = bundle.decode(&encoded)?;
        let mut rng = step_rng(seed ^ 0x5eed, u64::MAX);
        let attacked = noise::apply(&self.spec, &encoded, &mut rng)?;
        let soft = bundle.decode(&attacked)?;
        Ok(Validation {
            clean_accuracy: batch_bit_accuracy(&clean, &self.bits),
            attacked_accuracy: batch_bit_accuracy(&soft, &self.bits),
            ssim: ssim(&self.images, &encoded)?,
        })
    }
}

const CHECKPOINT_DIR: &str = "checkpoint";
const LOG_FILE: &str = "train_log.jsonl";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const DIVERGENCE_FILE: &str = "divergence.json";

fn save_optimizers(path: &Path, optimizers: &Optimizers) -> Result<()> {
    let mut bytes = Vec::new();
    for adam in optimizers.all() {
        bytes.extend_from_slice(&adam.step.to_le_bytes());
        for moment in adam.first.iter().chain(&adam.second) {
            for v in moment.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_file(path, &bytes)
}

fn load_optimizers(path: &Path, bundle: &ModelBundle, learning_rate: f32) -> Result<Optimizers> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut optimizers = Optimizers::new(bundle, learning_rate);
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| Error::format(path, "optimizer state is truncated"))?;
        cursor += n;
        Ok(chunk)
    };
    for adam in optimizers.all_mut() {
        adam.step = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        for moment in adam.first.iter_mut().chain(adam.second.iter_mut()) {
            let shape = moment.shape().to_vec();
            let raw = take(4 * moment.len())?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            *moment = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length matches");
        }
    }
    if cursor != bytes.len() {
        return Err(Error::format(path, "optimizer state has trailing bytes"));
    }
    Ok(optimizers)
}

/// Writes bundle, optimizer state and log prefix, replacing any previous
/// checkpoint only once the new one is complete.
fn write_checkpoint(out: &Path, bundle: &ModelBundle, optimizers: &Optimizers, log: &TrainLog) -> Result<()> {
    let tmp = out.join(format!("{CHECKPOINT_DIR}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    bundle.save(&tmp.join("bundle"))?;
    save_optimizers(&tmp.join(OPTIMIZER_FILE), optimizers)?;
    write_file(&tmp.join(LOG_FILE), log.to_jsonl().as_bytes())?;
    let dest = out.join(CHECKPOINT_DIR);
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
}

struct RunState {
    bundle: ModelBundle,
    optimizers: Optimizers,
    log: TrainLog,
}

fn resume_state(out: &Path, config: &TrainConfig) -> Result<Option<RunState>> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let bundle = ModelBundle::load(&dir.join("bundle"))?;
    if bundle.config != config.network || bundle.provenance.seed != config.seed {
        return Err(Error::Config(
            "checkpoint was written with a different network or seed".into(),
        ));
    }
    let optimizers = load_optimizers(&dir.join(OPTIMIZER_FILE), &bundle, config.learning_rate)?;
    let log_path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log = TrainLog::from_jsonl(&text).map_err(|e| Error::format(&log_path, e))?;
    Ok(Some(RunState {
        bundle,
        optimizers,
        log,
    }))
}

/// Options that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the log, checkpoints and final bundle.
    pub out: Option<PathBuf>,
    /// Continue from `out/checkpoint` when present.
    pub resume: bool,
    /// Stop after this many steps in total, leaving a checkpoint (for tests).
    pub stop_after: Option<u64>,
}

/// Full training run. With an output directory the log is appended line by
/// line and checkpoints are written periodically; the final bundle goes to
/// `out/bundle`.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, options: &RunOptions) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    manifest.validate()?;
    let mut loader = TrainingLoader::new(manifest.clone(), config.crop, config.network.message_length)?;
    let validation = ValidationSet::build(config, manifest)?;

    let resumed = match (&options.out, options.resume) {
        (Some(out), true) => resume_state(out, config)?,
        _ => None,
    };
    let RunState {
        mut bundle,
        mut optimizers,
        mut log,
    } = match resumed {
        Some(state) => {
            info!("resuming at step {}", state.bundle.provenance.step);
            state
        }
        None => {
            let mut bundle = init_bundle(&config.network, config.seed)?;
            bundle.provenance.regime = config.regime.id();
            let optimizers = Optimizers::new(&bundle, config.learning_rate);
            RunState {
                bundle,
                optimizers,
                log: TrainLog::default(),
            }
        }
    };

    let mut log_file = match &options.out {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join(LOG_FILE);
            write_file(&path, log.to_jsonl().as_bytes())?;
            Some((
                fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let start = bundle.provenance.step;
    let end = options.stop_after.map_or(config.steps, |s| s.min(config.steps));
    for step in start..end {
        let mut rng = step_rng(config.seed, step);
        let (covers, bits) = loader.batch(config.batch_size, &mut rng)?;
        let spec = sample_noise_layer(&config.regime, &config.jpeg_qualities, &mut rng);
        let result = train_step(
            &mut bundle,
            &mut optimizers,
            &covers,
            &bits,
            &spec,
            config.loss_weights,
            step,
            &mut rng,
            None,
        );
        let mut record = match result {
            Ok(r) => r,
            Err(e) => {
                if let Some(out) = &options.out {
                    let report = serde_json::json!({ "step": step, "noise": spec.to_string(), "error": e.to_string() });
                    write_file(&out.join(DIVERGENCE_FILE), format!("{report}\n").as_bytes())?;
                }
                return Err(e);
            }
        };
        bundle.provenance.step = step + 1;
        let done = step + 1 == config.steps;
        let validate_now = done || (config.validate_every > 0 && (step + 1) % config.validate_every == 0);
        if let (true, Some(v)) = (validate_now, &validation) {
            let result = v.evaluate(&bundle, config.seed)?;
            info!(
                "step {}: loss {:.4} clean {:.3} attacked {:.3} ssim {:.3}",
                step + 1,
                record.total_loss,
                result.clean_accuracy,
                result.attacked_accuracy,
                result.ssim
            );
            record.validation = Some(result);
        }
        if let Some((file, path)) = log_file.as_mut() {
            file.write_all(record_line(&record).as_bytes())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.records.push(record);
        let checkpoint_now = step + 1 == end
            || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0);
        if let (true, Some(out)) = (checkpoint_now, &options.out) {
            write_checkpoint(out, &bundle, &optimizers, &log)?;
        }
    }
    if let Some(out) = &options.out {
        if bundle.provenance.step == config.steps {
            bundle.save(&out.join("bundle"))?;
        }
    }
    Ok((bundle, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_splits, write_synthetic_corpus, SplitCounts};
    use crate::networks::NetConfig;

    fn tiny_net(l: usize) -> NetConfig {
        NetConfig {
            message_length: l,
            encoder_blocks: 1,
            decoder_blocks: 1,
            adversary_blocks: 1,
            channels: 8,
        }
    }

    fn batch(n: usize, size: usize, l: usize, seed: u64) -> (ImageBatch, Array2<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<ImageBatch> = (0..n)
            .map(|_| data::image_to_tensor(&data::synthetic_image(size as u32, size as u32, &mut rng)))
            .collect();
        let views: Vec<_> = imgs.iter().map(|i| i.view()).collect();
        let msgs: Vec<BitMessage> = (0..n).map(|_| BitMessage::random(l, &mut rng)).collect();
        (
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap(),
            message::to_array(&msgs).unwrap(),
        )
    }

    #[test]
    fn loss_examples() {
        let truth = BitMessage::parse("1010", 4).unwrap();
        assert_eq!(message_loss(&[1.0, 0.0, 1.0, 0.0], &truth).unwrap(), 0.0);
        assert_eq!(message_loss(&[0.0, 1.0, 0.0, 1.0], &truth).unwrap(), 1.0);
        assert_eq!(message_loss(&[0.0, 1.0, 1.0, 0.0], &truth).unwrap(), 0.5);
        assert!(message_loss(&[0.0; 3], &truth).is_err());

        let (a, _) = batch(2, 16, 4, 1);
        assert_eq!(image_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.mapv(|v| v + 0.25);
        assert!((image_loss(&shifted, &a).unwrap() - 0.0625).abs() < 1e-9);
        assert_eq!(image_loss(&shifted, &a).unwrap(), image_loss(&a, &shifted).unwrap());
    }

    #[test]
    fn adversarial_loss_limits() {
        let ln2 = std::f64::consts::LN_2;
        let (d, g) = adversarial_losses(&[0.5; 4], &[0.5; 4]);
        assert!((d - ln2).abs() < 1e-12 && (g - ln2).abs() < 1e-12);
        let (d, g) = adversarial_losses(&[0.0; 4], &[1.0; 4]);
        assert!(d < 1e-9 && g > 20.0);
        let gs: Vec<f64> = [0.9f32, 0.5, 0.1].iter().map(|&s| adversarial_losses(&[0.5], &[s]).1).collect();
        assert!(gs[0] > gs[1] && gs[1] > gs[2]);
    }

    #[test]
    fn regime_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_noise_layer(&Regime::Identity, &JPEG_QUALITIES, &mut rng), NoiseSpec::Identity);
            let spec = sample_noise_layer(&Regime::Specialized { layer: NoiseKind::Mirror }, &JPEG_QUALITIES, &mut rng);
            assert_eq!(spec, NoiseSpec::Mirror);
        }
        let mut counts = [0usize; 9];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_noise_layer(&Regime::combined(), &JPEG_QUALITIES, &mut rng).kind() as usize] += 1;
        }
        assert_eq!(counts[NoiseKind::Shear as usize], 0);
        let p = 1.0 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for k in COMBINED_LAYERS {
            assert!((counts[k as usize] as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{k}");
        }
    }

    #[test]
    fn regime_validation() {
        assert!(Regime::combined().validate().is_ok());
        let mut with_shear = COMBINED_LAYERS.to_vec();
        with_shear.push(NoiseKind::Shear);
        assert!(Regime::Combined { layers: with_shear }.validate().is_err());
        assert!(Regime::Combined { layers: COMBINED_LAYERS[..5].to_vec() }.validate().is_err());
        assert!(Regime::Specialized { layer: NoiseKind::Crop }.validate().is_err());
        assert!(Regime::Specialized { layer: NoiseKind::Shear }.validate().is_ok());
    }

    #[test]
    fn config_toml_round_trip_and_rejections() {
        let config = TrainConfig {
            regime: Regime::Specialized { layer: NoiseKind::Rotate },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&config.to_toml()).unwrap(), config);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[loss_weights]\nmessage = -1.0\nimage = 0.0\nadversarial = 0.0").is_err());
        let text = "[regime]\nkind = \"combined\"\nlayers = [\"rescale\", \"translate\", \"rotate\", \"mirror\", \"gaussian_blur\", \"jpeg_diff\", \"shear\"]";
        assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))));
        let ok = "[regime]\nkind = \"combined\"";
        assert_eq!(TrainConfig::from_toml(ok).unwrap().regime, Regime::combined());
    }

    #[test]
    fn zero_weights_leave_message_loss() {
        let mut bundle = init_bundle(&tiny_net(4), 1).unwrap();
        let (covers, bits) = batch(2, 16, 4, 2);
        let weights = LossWeights {
            message: 1.0,
            image: 0.0,
            adversarial: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = generator_pass(&mut bundle, &covers, &bits, &NoiseSpec::Identity, weights, &mut rng, None).unwrap();
        assert_eq!(pass.losses.total, pass.losses.message);
        assert!(pass.losses.generator.is_none());
    }

    #[test]
    fn decoder_sees_the_attacked_image() {
        let mut bundle = init_bundle(&tiny_net(4), 1).unwrap();
        let mut opt = Optimizers::new(&bundle, 1e-3);
        let (covers, bits) = batch(2, 24, 4, 3);
        let mut seen = 0;
        let mut hook = |t: &StepTrace<'_>| {
            assert!(std::ptr::eq(t.decoder_input, t.attacked));
            assert_ne!(t.attacked, t.encoded);
            assert_eq!(t.attacked, &crate::noise::geometry::mirror(t.encoded));
            seen += 1;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(
            &mut bundle,
            &mut opt,
            &covers,
            &bits,
            &NoiseSpec::Mirror,
            LossWeights::default(),
            0,
            &mut rng,
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(seen, 1);
    }

    #[test]
    fn encoder_receives_gradient_through_every_layer() {
        let (covers, bits) = batch(2, 32, 4, 4);
        let specs = [
            NoiseSpec::Identity,
            NoiseSpec::Rescale { factor: 0.7 },
            NoiseSpec::Translate { dx: 0.1, dy: -0.2 },
            NoiseSpec::Rotate { angle: 20.0 },
            NoiseSpec::Shear { angle: 15.0 },
            NoiseSpec::Mirror,
            NoiseSpec::Crop { ratio: 0.5 },
            NoiseSpec::GaussianBlur { sigma: 1.0 },
            NoiseSpec::JpegDiff { quality: 50 },
        ];
        let weights = LossWeights {
            message: 1.0,
            image: 0.0,
            adversarial: 0.0,
        };
        for spec in specs {
            let mut bundle = init_bundle(&tiny_net(4), 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pass = generator_pass(&mut bundle, &covers, &bits, &spec, weights, &mut rng, None).unwrap();
            assert!(pass.encoder_grads.l2_norm() > 0.0, "{spec}");
        }
    }

    #[test]
    fn adversary_and_generator_updates_are_separate() {
        let mut bundle = init_bundle(&tiny_net(4), 1).unwrap();
        let mut opt = Optimizers::new(&bundle, 1e-3);
        let (covers, bits) = batch(2, 16, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let record = train_step(&mut bundle, &mut opt, &covers, &bits, &NoiseSpec::Identity, LossWeights::default(), 0, &mut rng, None).unwrap();
        assert!(record.discriminator_loss.is_some());
        assert_eq!([opt.encoder.step, opt.decoder.step, opt.adversary.step], [1, 1, 1]);
        let weights = LossWeights {
            adversarial: 0.0,
            ..LossWeights::default()
        };
        let before = bundle.adversary_params.clone();
        train_step(&mut bundle, &mut opt, &covers, &bits, &NoiseSpec::Identity, weights, 1, &mut rng, None).unwrap();
        assert_eq!(opt.adversary.step, 1);
        assert_eq!(bundle.adversary_params, before);
    }

    #[test]
    fn non_finite_input_is_reported_as_divergence() {
        let mut bundle = init_bundle(&tiny_net(4), 1).unwrap();
        let mut opt = Optimizers::new(&bundle, 1e-3);
        let (mut covers, bits) = batch(2, 16, 4, 6);
        covers[[0, 0, 0, 0]] = f32::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_step(&mut bundle, &mut opt, &covers, &bits, &NoiseSpec::Identity, LossWeights::default(), 7, &mut rng, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 7, .. }));
    }

    #[test]
    fn overfits_a_single_batch() {
        let mut bundle = init_bundle(&tiny_net(8), 3).unwrap();
        let mut opt = Optimizers::new(&bundle, 1e-2);
        let (covers, bits) = batch(4, 16, 8, 7);
        let weights = LossWeights {
            message: 1.0,
            image: 0.0,
            adversarial: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = f64::MAX;
        for step in 0..500 {
            last = train_step(&mut bundle, &mut opt, &covers, &bits, &NoiseSpec::Identity, weights, step, &mut rng, None)
                .unwrap()
                .message_loss;
        }
        assert!(last < 0.01, "message loss {last}");
    }

    fn toy_config(steps: u64) -> (tempfile::TempDir, TrainConfig, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        write_synthetic_corpus(&images, 10, 40, 1).unwrap();
        let manifest = build_splits(&images, SplitCounts { train: 6, val: 2, test: 2 }, 1).unwrap().0;
        let config = TrainConfig {
            seed: 4,
            steps,
            batch_size: 2,
            crop: 32,
            regime: Regime::combined(),
            network: tiny_net(4),
            validate_every: 3,
            validation_images: 2,
            checkpoint_every: 4,
            ..TrainConfig::default()
        };
        (dir, config, manifest)
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let (dir, config, manifest) = toy_config(6);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let (bundle_a, log_a) = train(&config, &manifest, &RunOptions { out: Some(out_a.clone()), ..Default::default() }).unwrap();
        let (bundle_b, _) = train(&config, &manifest, &RunOptions { out: Some(out_b.clone()), ..Default::default() }).unwrap();
        assert_eq!(bundle_a.encoder_params, bundle_b.encoder_params);
        let text_a = fs::read_to_string(out_a.join(LOG_FILE)).unwrap();
        assert_eq!(text_a, fs::read_to_string(out_b.join(LOG_FILE)).unwrap());
        assert_eq!(text_a, log_a.to_jsonl());
        assert_eq!(TrainLog::from_jsonl(&text_a).unwrap(), log_a);
        assert_eq!(log_a.records.len(), 6);
        assert!(log_a.records[2].validation.is_some() && log_a.records[5].validation.is_some());
        assert!(out_a.join("bundle/bundle.toml").exists());
        assert_eq!(bundle_a.provenance.step, 6);
        assert_eq!(bundle_a.provenance.regime, "combined");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (dir, config, manifest) = toy_config(7);
        let full = dir.path().join("full");
        let split = dir.path().join("split");
        let (bundle_full, log_full) = train(&config, &manifest, &RunOptions { out: Some(full), ..Default::default() }).unwrap();
        let partial = RunOptions {
            out: Some(split.clone()),
            resume: false,
            stop_after: Some(5),
        };
        let (_, log_partial) = train(&config, &manifest, &partial).unwrap();
        assert_eq!(log_partial.records.len(), 5);
        let resume = RunOptions {
            out: Some(split.clone()),
            resume: true,
            stop_after: None,
        };
        let (bundle_resumed, log_resumed) = train(&config, &manifest, &resume).unwrap();
        assert_eq!(log_resumed, log_full);
        assert_eq!(bundle_resumed.encoder_params, bundle_full.encoder_params);
        assert_eq!(bundle_resumed.adversary_params, bundle_full.adversary_params);
        assert_eq!(fs::read_to_string(split.join(LOG_FILE)).unwrap(), log_full.to_jsonl());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = init_bundle(&tiny_net(4), 1).unwrap();
        let mut opt = Optimizers::new(&bundle, 1e-3);
        let (covers, bits) = batch(2, 16, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut bundle, &mut opt, &covers, &bits, &NoiseSpec::Identity, LossWeights::default(), 0, &mut rng, None).unwrap();
        let path = dir.path().join("opt.bin");
        save_optimizers(&path, &opt).unwrap();
        assert_eq!(load_optimizers(&path, &bundle, 1e-3).unwrap(), opt);
    }
}
