//! Encoder, decoder and adversary networks plus the on-disk model bundle.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{self, BitMessage};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, sigmoid, ConvBlock, ConvBlockCache, Conv2d, Grads,
    Init, Linear, ParamStore,
};
use crate::tensor::{clamp_pixels, ensure_rgb, ImageBatch};

/// Init gain of the residual head; a small start keeps early encodings near the cover.
const RESIDUAL_GAIN: f64 = 0.1;

/// Smallest spatial side the decoder accepts.
pub const MIN_DECODE_SIZE: usize = 16;
pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "bundle.toml";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub message_length: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub adversary_blocks: usize,
    pub channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            message_length: message::DEFAULT_MESSAGE_LENGTH,
            encoder_blocks: 4,
            decoder_blocks: 7,
            adversary_blocks: 3,
            channels: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.message_length < 1 {
            return Err(Error::Config("message_length must be at least 1".into()));
        }
        for (name, v) in [
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("adversary_blocks", self.adversary_blocks),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.channels < 8 {
            return Err(Error::Config(format!(
                "channels must be at least 8, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Where a bundle came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub regime: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
    pub fuse: ConvBlock,
    pub out: Conv2d,
    channels: usize,
    message_length: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<ConvBlockCache>,
    fuse: ConvBlockCache,
    fused: Array4<f32>,
}

impl Encoder {
    fn build<R: rand::Rng>(config: &NetConfig, init: &mut Init<'_, R>) -> Self {
        let c = config.channels;
        let blocks = (0..config.encoder_blocks)
            .map(|i| ConvBlock::new(init, &format!("encoder.block{i}"), if i == 0 { 3 } else { c }, c))
            .collect();
        let fuse = ConvBlock::new(init, "encoder.fuse", c + config.message_length + 3, c);
        let out = Conv2d::new(init, "encoder.out", c, 3, 1, RESIDUAL_GAIN);
        Encoder {
            blocks,
            fuse,
            out,
            channels: c,
            message_length: config.message_length,
        }
    }

    /// Bits in {0,1} become ±1 planes replicated over the image.
    fn message_planes(bits: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
        let (n, l) = bits.dim();
        Array4::from_shape_fn((n, l, h, w), |(b, j, _, _)| 2.0 * bits[[b, j]] - 1.0)
    }

    fn check(&self, cover: &ImageBatch, bits: &Array2<f32>) -> Result<()> {
        ensure_rgb(cover)?;
        if bits.dim() != (cover.dim().0, self.message_length) {
            return Err(Error::Shape(format!(
                "expected messages of shape ({}, {}), got {:?}",
                cover.dim().0,
                self.message_length,
                bits.dim()
            )));
        }
        Ok(())
    }

    /// Unclamped forward pass with batch statistics.
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        cover: &ImageBatch,
        bits: &Array2<f32>,
    ) -> Result<(ImageBatch, EncoderCache)> {
        self.check(cover, bits)?;
        let (_, _, h, w) = cover.dim();
        let mut x = cover.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_train(store, &x);
            caches.push(cache);
            x = y;
        }
        let planes = Self::message_planes(bits, h, w);
        let joined = concatenate![Axis(1), x, planes, *cover];
        let (fused, fuse_cache) = self.fuse.forward_train(store, &joined);
        let encoded = cover + &self.out.forward(store, &fused);
        Ok((
            encoded,
            EncoderCache {
                blocks: caches,
                fuse: fuse_cache,
                fused,
            },
        ))
    }

    pub fn forward_eval(&self, store: &ParamStore, cover: &ImageBatch, bits: &Array2<f32>) -> Result<ImageBatch> {
        self.check(cover, bits)?;
        let (_, _, h, w) = cover.dim();
        let mut x = cover.clone();
        for block in &self.blocks {
            x = block.forward_eval(store, &x);
        }
        let planes = Self::message_planes(bits, h, w);
        let joined = concatenate![Axis(1), x, planes, *cover];
        let fused = self.fuse.forward_eval(store, &joined);
        Ok(clamp_pixels(&(cover + &self.out.forward(store, &fused))))
    }

    /// Accumulates parameter gradients. The cover gradient is returned only
    /// when requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        grad_encoded: &ImageBatch,
        grads: &mut Grads,
        need_cover_grad: bool,
    ) -> Option<ImageBatch> {
        let gf = self
            .out
            .backward(store, &cache.fused, grad_encoded, grads, true)
            .expect("input grad requested");
        let gj = self
            .fuse
            .backward(store, &cache.fuse, &gf, grads, true)
            .expect("input grad requested");
        let c = self.channels;
        let mut g = gj.slice(s![.., ..c, .., ..]).to_owned();
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let need = i > 0 || need_cover_grad;
            match block.backward(store, bc, &g, grads, need) {
                Some(next) => g = next,
                None => break,
            }
        }
        need_cover_grad.then(|| {
            let skip = gj.slice(s![.., c + self.message_length.., .., ..]);
            g + &skip + grad_encoded
        })
    }
}

/// Shared trunk of the decoder and adversary: conv blocks then pooling and an
/// affine head.
#[derive(Debug, Clone)]
pub struct PooledNet {
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct PooledCache {
    blocks: Vec<ConvBlockCache>,
    pooled: Array2<f32>,
    spatial: (usize, usize),
}

impl PooledNet {
    fn build<R: rand::Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        widths: &[usize],
        head_out: usize,
    ) -> Self {
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| ConvBlock::new(init, &format!("{prefix}.block{i}"), pair[0], pair[1]))
            .collect();
        let last = *widths.last().expect("at least one width");
        let head = Linear::new(init, &format!("{prefix}.head"), last, head_out);
        PooledNet { blocks, head }
    }

    /// Returns pre-sigmoid logits of shape `(n, head_out)`.
    pub fn forward_train(&self, store: &mut ParamStore, img: &ImageBatch) -> (Array2<f32>, PooledCache) {
        let mut x = img.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_train(store, &x);
            caches.push(cache);
            x = y;
        }
        let pooled = global_avg_pool(&x);
        let logits = self.head.forward(store, &pooled);
        let (_, _, h, w) = x.dim();
        (
            logits,
            PooledCache {
                blocks: caches,
                pooled,
                spatial: (h, w),
            },
        )
    }

    pub fn forward_eval(&self, store: &ParamStore, img: &ImageBatch) -> Array2<f32> {
        let mut x = img.clone();
        for block in &self.blocks {
            x = block.forward_eval(store, &x);
        }
        self.head.forward(store, &global_avg_pool(&x))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PooledCache,
        grad_logits: &Array2<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<ImageBatch> {
        let gp = self.head.backward(store, &cache.pooled, grad_logits, grads);
        let mut g = global_avg_pool_backward(&gp, cache.spatial);
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match block.backward(store, bc, &g, grads, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}

fn sigmoid_array(logits: &Array2<f32>) -> Array2<f32> {
    logits.mapv(sigmoid)
}

#[derive(Debug, Clone)]
pub struct Networks {
    pub encoder: Encoder,
    pub decoder: PooledNet,
    pub adversary: PooledNet,
}

/// Parameters of all three networks together with their configuration.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub provenance: Provenance,
    pub nets: Networks,
    pub encoder_params: ParamStore,
    pub decoder_params: ParamStore,
    pub adversary_params: ParamStore,
}

fn build(config: &NetConfig, seed: u64) -> (Networks, [ParamStore; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.channels;
    let l = config.message_length;
    let mut enc = ParamStore::new();
    let encoder = Encoder::build(config, &mut Init { store: &mut enc, rng: &mut rng });

    let mut dec = ParamStore::new();
    let mut widths = vec![3];
    widths.extend(std::iter::repeat_n(c, config.decoder_blocks));
    widths.push(l);
    let decoder = PooledNet::build(&mut Init { store: &mut dec, rng: &mut rng }, "decoder", &widths, l);

    let mut adv = ParamStore::new();
    let mut widths = vec![3];
    widths.extend(std::iter::repeat_n(c, config.adversary_blocks));
    let adversary = PooledNet::build(&mut Init { store: &mut adv, rng: &mut rng }, "adversary", &widths, 1);
    (
        Networks {
            encoder,
            decoder,
            adversary,
        },
        [enc, dec, adv],
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format_version: u32,
    config: NetConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the parameter blob.
    offset: u64,
    len: u64,
}

impl ModelBundle {
    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.encoder_params, &self.decoder_params, &self.adversary_params]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 3] {
        [
            &mut self.encoder_params,
            &mut self.decoder_params,
            &mut self.adversary_params,
        ]
    }

    pub fn message_length(&self) -> usize {
        self.config.message_length
    }

    /// Embeds one message into every image of the batch.
    pub fn encode(&self, cover: &ImageBatch, message: &BitMessage) -> Result<ImageBatch> {
        self.check_message(message)?;
        let n = cover.dim().0;
        let bits = message::to_array(&vec![message.clone(); n])?;
        self.encode_batch(cover, &bits)
    }

    /// Embeds per-image messages given as a `(n, L)` array of 0/1 values.
    pub fn encode_batch(&self, cover: &ImageBatch, bits: &Array2<f32>) -> Result<ImageBatch> {
        self.nets.encoder.forward_eval(&self.encoder_params, cover, bits)
    }

    fn check_message(&self, message: &BitMessage) -> Result<()> {
        if message.len() != self.config.message_length {
            return Err(Error::Shape(format!(
                "message has {} bits, model expects {}",
                message.len(),
                self.config.message_length
            )));
        }
        Ok(())
    }

    /// Soft message estimates in (0, 1), one row per image.
    pub fn decode(&self, img: &ImageBatch) -> Result<Array2<f32>> {
        ensure_rgb(img)?;
        let (_, _, h, w) = img.dim();
        if h < MIN_DECODE_SIZE || w < MIN_DECODE_SIZE {
            return Err(Error::Shape(format!(
                "decoder needs at least {MIN_DECODE_SIZE}x{MIN_DECODE_SIZE} pixels, got {h}x{w}"
            )));
        }
        Ok(sigmoid_array(&self.nets.decoder.forward_eval(&self.decoder_params, img)))
    }

    /// Probability that each image carries a watermark.
    pub fn adversary_score(&self, img: &ImageBatch) -> Result<Array1<f32>> {
        ensure_rgb(img)?;
        let logits = self.nets.adversary.forward_eval(&self.adversary_params, img);
        Ok(sigmoid_array(&logits).column(0).to_owned())
    }

    /// Zeroes the encoder output layer so encoding returns the cover.
    pub fn zero_residual(&mut self) {
        let out = &self.nets.encoder.out;
        self.encoder_params.get_mut(out.weight).fill(0.0);
        self.encoder_params.get_mut(out.bias).fill(0.0);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for param in self.stores().into_iter().flat_map(|s| s.iter()) {
            let offset = blob.len() as u64;
            for v in param.value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: param.name.clone(),
                shape: param.value.shape().to_vec(),
                offset,
                len: blob.len() as u64 - offset,
            });
        }
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            tensors,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e))?;
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        write_file(&dir.join(PARAMS_FILE), &blob)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BundleManifest =
            toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e))?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported bundle format version {}", manifest.format_version),
            ));
        }
        manifest
            .config
            .validate()
            .map_err(|e| Error::format(&manifest_path, e))?;
        let blob_path = dir.join(PARAMS_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

        let mut bundle = init_bundle(&manifest.config, 0)?;
        bundle.provenance = manifest.provenance;
        let total: usize = bundle.stores().iter().map(|s| s.len()).sum();
        if manifest.tensors.len() != total {
            return Err(Error::format(
                &manifest_path,
                format!("expected {total} tensors, found {}", manifest.tensors.len()),
            ));
        }
        let mut entries = manifest.tensors.iter();
        for store in bundle.stores_mut() {
            for param in store.iter_mut() {
                let entry = entries.next().expect("count checked");
                if entry.name != param.name || entry.shape != param.value.shape() {
                    return Err(Error::format(
                        &manifest_path,
                        format!(
                            "tensor `{}` {:?} does not match expected `{}` {:?}",
                            entry.name,
                            entry.shape,
                            param.name,
                            param.value.shape()
                        ),
                    ));
                }
                let start = entry.offset as usize;
                let end = start + entry.len as usize;
                if entry.len as usize != 4 * param.value.len() || end > blob.len() {
                    return Err(Error::format(&blob_path, format!("bad extent for `{}`", entry.name)));
                }
                let values: Vec<f32> = blob[start..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                param.value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
            }
        }
        Ok(bundle)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Freshly initialized networks, deterministic in `seed`.
pub fn init_bundle(config: &NetConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let (nets, [enc, dec, adv]) = build(config, seed);
    Ok(ModelBundle {
        config: config.clone(),
        provenance: Provenance {
            regime: "untrained".into(),
            seed,
            step: 0,
        },
        nets,
        encoder_params: enc,
        decoder_params: dec,
        adversary_params: adv,
    })
}
