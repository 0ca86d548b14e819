//! Minimal layer library with explicit forward caches and backward passes.
//!
//! Parameters live in a [`ParamStore`]; layers only hold indices into it, so
//! the same store can be serialized, updated by the optimizer, or shared
//! read-only by inference. All network arithmetic is `f32`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    /// Running statistics are stored alongside weights but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect())
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<ArrayD<f32>>);

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.0[id]
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Helper for registering parameters with fan-in scaled initialization.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data");
        self.store.push(name, value, true)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32, trainable: bool) -> ParamId {
        self.store.push(name, ArrayD::from_elem(IxDyn(shape), v), trainable)
    }
}

fn view2(a: &ArrayD<f32>) -> ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
}

fn view1(a: &ArrayD<f32>) -> ndarray::ArrayView1<'_, f32> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
}

/// Square convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = init.normal(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            gain / fan_in.sqrt(),
        );
        let bias = init.constant(format!("{name}.bias"), &[out_channels], 0.0, true);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f32> {
        let k2 = self.in_channels * self.kernel * self.kernel;
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, k2))
            .expect("contiguous weight")
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let k2 = c * self.kernel * self.kernel;
        let wm = self.weight_matrix(store);
        let bias = view1(store.get(self.bias));
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array4::<f32>::zeros((n, self.out_channels, h, w));
        let dst = out.as_slice_mut().expect("fresh array");
        let mut cols = vec![0f32; if self.kernel == 1 { 0 } else { k2 * hw }];
        for (img, out_img) in src.chunks_exact(c * hw).zip(dst.chunks_exact_mut(self.out_channels * hw)) {
            let cols_view = if self.kernel == 1 {
                ArrayView2::from_shape((c, hw), img).expect("1x1 input view")
            } else {
                im2col(img, c, h, w, self.kernel, self.pad(), &mut cols);
                ArrayView2::from_shape((k2, hw), &cols[..]).expect("cols view")
            };
            let mut out_view =
                ArrayViewMut2::from_shape((self.out_channels, hw), out_img).expect("output view");
            for (mut row, &b) in out_view.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row.fill(b);
            }
            general_mat_mul(1.0, &wm, &cols_view, 1.0, &mut out_view);
        }
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        grad_out: &Array4<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Array4<f32>> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let k2 = c * self.kernel * self.kernel;
        let wm = self.weight_matrix(store);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let grad_out = grad_out.as_standard_layout();
        let gsrc = grad_out.as_slice().expect("standard layout");

        let mut dw = Array2::<f32>::zeros((self.out_channels, k2));
        let mut db = Array1::<f32>::zeros(self.out_channels);
        let mut dx = need_input_grad.then(|| Array4::<f32>::zeros((n, c, h, w)));
        let mut cols = vec![0f32; if self.kernel == 1 { 0 } else { k2 * hw }];
        let mut dcols = Array2::<f32>::zeros((k2, hw));
        for b in 0..n {
            let img = &src[b * c * hw..(b + 1) * c * hw];
            let gy = ArrayView2::from_shape((self.out_channels, hw), &gsrc[b * self.out_channels * hw..(b + 1) * self.out_channels * hw])
                .expect("grad view");
            let cols_view = if self.kernel == 1 {
                ArrayView2::from_shape((c, hw), img).expect("1x1 input view")
            } else {
                im2col(img, c, h, w, self.kernel, self.pad(), &mut cols);
                ArrayView2::from_shape((k2, hw), &cols[..]).expect("cols view")
            };
            general_mat_mul(1.0, &gy, &cols_view.t(), 1.0, &mut dw);
            db += &gy.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(1.0, &wm.t(), &gy, 0.0, &mut dcols);
                let dimg = &mut dx.as_slice_mut().expect("fresh array")[b * c * hw..(b + 1) * c * hw];
                if self.kernel == 1 {
                    dimg.copy_from_slice(dcols.as_slice().expect("contiguous"));
                } else {
                    col2im(dcols.as_slice().expect("contiguous"), c, h, w, self.kernel, self.pad(), dimg);
                }
            }
        }
        let gw = grads.get_mut(self.weight);
        *gw += &dw.into_shape_with_order(gw.raw_dim()).expect("weight grad shape");
        let gb = grads.get_mut(self.bias);
        *gb += &db.into_dyn();
        dx
    }
}

/// Unfolds `k × k` neighbourhoods of a `(c, h, w)` image into `(c·k·k, h·w)`.
fn im2col(img: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(w, kx, pad);
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x_lo].fill(0.0);
                    out_row[x_hi..].fill(0.0);
                    let shift = kx as isize - pad as isize;
                    let s_lo = (x_lo as isize + shift) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: sums column entries back onto the image.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f32]) {
    let hw = h * w;
    img.fill(0.0);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(w, kx, pad);
                let shift = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let s_lo = (x_lo as isize + shift) as usize;
                    let dst = &mut img[base + s_lo..base + s_lo + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Output columns `x` whose source column `x + kx - pad` lies inside `[0, w)`.
fn valid_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let shift = kx as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((w as isize) - shift).min(w as isize).max(lo as isize) as usize;
    (lo.min(w), hi)
}

/// Per-channel batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0, true),
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0, true),
            running_mean: init.constant(format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: init.constant(format!("{name}.running_var"), &[channels], 1.0, false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics and folds them into the running averages.
    pub fn forward_train(&self, store: &mut ParamStore, x: &Array4<f32>) -> (Array4<f32>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let m = lane.iter().map(|&v| v as f64).sum::<f64>() / count;
            let v = lane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m as f32;
            var[ch] = v as f32;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut normalized = x.clone();
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            normalized.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * s);
        }
        let out = self.affine(store, &normalized);

        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 } as f32;
        let mom = self.momentum;
        let rm = store.get_mut(self.running_mean);
        for (r, &m) in rm.iter_mut().zip(mean.iter()) {
            *r = (1.0 - mom) * *r + mom * m;
        }
        let rv = store.get_mut(self.running_var);
        for (r, &v) in rv.iter_mut().zip(var.iter()) {
            *r = (1.0 - mom) * *r + mom * v * unbias;
        }
        (out, BatchNormCache { normalized, inv_std })
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let mean = view1(store.get(self.running_mean));
        let var = view1(store.get(self.running_var));
        let mut normalized = x.clone();
        for ch in 0..x.dim().1 {
            let m = mean[ch];
            let s = 1.0 / (var[ch] + self.eps).sqrt();
            normalized.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * s);
        }
        self.affine(store, &normalized)
    }

    fn affine(&self, store: &ParamStore, normalized: &Array4<f32>) -> Array4<f32> {
        let gamma = view1(store.get(self.gamma));
        let beta = view1(store.get(self.beta));
        let mut out = normalized.clone();
        for ch in 0..out.dim().1 {
            let (g, b) = (gamma[ch], beta[ch]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        out
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        grad_out: &Array4<f32>,
        grads: &mut Grads,
    ) -> Array4<f32> {
        let (n, c, h, w) = grad_out.dim();
        let count = (n * h * w) as f32;
        let gamma = view1(store.get(self.gamma)).to_owned();
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        for ch in 0..c {
            let gy = grad_out.index_axis(Axis(1), ch);
            let xh = cache.normalized.index_axis(Axis(1), ch);
            let sum_g: f32 = gy.sum();
            let sum_gx: f32 = gy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            let scale = gamma[ch] * cache.inv_std[ch] / count;
            let mut dlane = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dlane)
                .and(&gy)
                .and(&xh)
                .for_each(|d, &g, &x| *d = scale * (count * g - sum_g - x * sum_gx));
        }
        *grads.get_mut(self.gamma) += &dgamma.into_dyn();
        *grads.get_mut(self.beta) += &dbeta.into_dyn();
        dx
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    input: Array4<f32>,
    bn: BatchNormCache,
    output: Array4<f32>,
}

impl ConvBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, in_channels: usize, out_channels: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(init, &format!("{name}.conv"), in_channels, out_channels, 3, 2f64.sqrt()),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward_train(&self, store: &mut ParamStore, x: &Array4<f32>) -> (Array4<f32>, ConvBlockCache) {
        let z = self.conv.forward(store, x);
        let (mut y, bn) = self.bn.forward_train(store, &z);
        y.mapv_inplace(|v| v.max(0.0));
        let cache = ConvBlockCache {
            input: x.clone(),
            bn,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let z = self.conv.forward(store, x);
        let mut y = self.bn.forward_eval(store, &z);
        y.mapv_inplace(|v| v.max(0.0));
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvBlockCache,
        grad_out: &Array4<f32>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<Array4<f32>> {
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g)
            .and(&cache.output)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
        let gz = self.bn.backward(store, &cache.bn, &g, grads);
        self.conv.backward(store, &cache.input, &gz, grads, need_input_grad)
    }
}

/// Fully connected layer on `(batch, features)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: init.normal(
                format!("{name}.weight"),
                &[out_features, in_features],
                1.0 / (in_features as f64).sqrt(),
            ),
            bias: init.constant(format!("{name}.bias"), &[out_features], 0.0, true),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        let w = view2(store.get(self.weight));
        let b = view1(store.get(self.bias));
        x.dot(&w.t()) + &b
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array2<f32>,
        grad_out: &Array2<f32>,
        grads: &mut Grads,
    ) -> Array2<f32> {
        let w = view2(store.get(self.weight));
        let dw = grad_out.t().dot(x);
        *grads.get_mut(self.weight) += &dw.into_dyn();
        *grads.get_mut(self.bias) += &grad_out.sum_axis(Axis(0)).into_dyn();
        grad_out.dot(&w)
    }
}

/// Spatial mean per channel: `(n, c, h, w) → (n, c)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f32;
    Array2::from_shape_fn((n, c), |(b, ch)| {
        x.slice(ndarray::s![b, ch, .., ..]).sum() / area
    })
}

pub fn global_avg_pool_backward(grad: &Array2<f32>, spatial: (usize, usize)) -> Array4<f32> {
    let (n, c) = grad.dim();
    let area = (spatial.0 * spatial.1) as f32;
    Array4::from_shape_fn((n, c, spatial.0, spatial.1), |(b, ch, _, _)| grad[[b, ch]] / area)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub first: Vec<ArrayD<f32>>,
    pub second: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f32) -> Self {
        let zeros: Vec<ArrayD<f32>> = store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (((param, g), m), v) in store
            .iter_mut()
            .zip(&grads.0)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if !param.trainable {
                continue;
            }
            ndarray::Zip::from(&mut param.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
