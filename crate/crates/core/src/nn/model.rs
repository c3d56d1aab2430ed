//! Parameters, forward and backward passes.

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelSpec, NnError};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{self, col2im, gemm, im2col, transpose, Bias, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor<T>>>,
    bn: Vec<Option<BatchNormStats<T>>>,
    mode: Mode,
}

/// Parameter gradients, laid out exactly like [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flatten().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flatten().flat_map(|t| t.data().iter().copied()).collect()
    }
}

enum Cache<T> {
    Dense { input: Vec<T> },
    Conv { cols: Vec<T>, geom: ConvGeometry },
    Relu { output: Vec<T> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Passthrough,
    Dropout { scale: Option<Vec<T>> },
    BatchNorm { normalized: Vec<T>, inv_std: Vec<f64>, batch_stats: bool },
}

/// Everything a forward pass produces: pre-softmax logits, the activations
/// entering the classifier, and the caches the backward pass consumes.
pub struct ForwardPass<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub penultimate: Tensor<T>,
    batch: usize,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

type BatchMoments = Option<(Vec<f64>, Vec<f64>, usize)>;

impl<T: Scalar> Model<T> {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale and zero
    /// shift. Weights are drawn layer by layer in storage order.
    pub fn init(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Self, NnError> {
        let shapes = spec.shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut bn = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let (fan_in, fan_out) = match *layer {
                LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w),
                _ => (0, 0),
            };
            let tensors = match *layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let ps = layer.param_shapes();
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = ps[0].iter().product();
                    let w: Vec<T> = (0..n).map(|_| T::narrow(rng.uniform_range(-limit, limit))).collect();
                    vec![Tensor::new(ps[0].clone(), w)?, Tensor::zeros(&ps[1])]
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    vec![Tensor::filled(&[channels], T::one()), Tensor::zeros(&[channels])]
                }
                _ => Vec::new(),
            };
            params.push(tensors);
            bn.push(match *layer {
                LayerSpec::BatchNorm { channels, .. } => Some(BatchNormStats {
                    mean: vec![T::zero(); channels],
                    var: vec![T::one(); channels],
                }),
                _ => None,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            shapes,
            params,
            bn,
            mode: Mode::Train,
        })
    }

    /// Rebuilds a model from explicit parameters and batch-norm statistics.
    pub fn from_parts(
        spec: &ModelSpec,
        params: Vec<Vec<Tensor<T>>>,
        bn: Vec<Option<BatchNormStats<T>>>,
    ) -> Result<Self, NnError> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() || bn.len() != spec.layers.len() {
            return Err(NnError::ParamShape("layer count differs from spec".into()));
        }
        for (i, (layer, ps)) in spec.layers.iter().zip(&params).enumerate() {
            let want = layer.param_shapes();
            let got: Vec<Vec<usize>> = ps.iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(NnError::ParamShape(format!("layer {i}: expected {want:?}, found {got:?}")));
            }
            let want_bn = match layer {
                LayerSpec::BatchNorm { channels, .. } => Some(*channels),
                _ => None,
            };
            let got_bn = bn[i].as_ref().map(|s| (s.mean.len(), s.var.len()));
            if want_bn.map(|c| (c, c)) != got_bn {
                return Err(NnError::ParamShape(format!("layer {i}: batch-norm statistics do not match spec")));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            shapes,
            params,
            bn,
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[Option<BatchNormStats<T>>] {
        &self.bn
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// All parameters concatenated in layer order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flatten().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|ps| ps.iter().map(Tensor::cast).collect()).collect(),
            bn: self
                .bn
                .iter()
                .map(|s| {
                    s.as_ref().map(|s| BatchNormStats {
                        mean: s.mean.iter().map(|v| U::narrow(v.widen())).collect(),
                        var: s.var.iter().map(|v| U::narrow(v.widen())).collect(),
                    })
                })
                .collect(),
            mode: self.mode,
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .params
                .iter()
                .map(|ps| ps.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    fn batch_size_of(&self, batch: &Tensor<T>) -> Result<usize, NnError> {
        let per = self.spec.input_len();
        let shape = batch.shape();
        let trailing: usize = shape.iter().skip(1).product();
        if shape.len() < 2 || trailing != per {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(NnError::BatchShape {
                expected,
                found: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    /// Forward pass in the model's current mode. In train mode, dropout
    /// draws from `rng` and batch-norm running statistics are updated.
    pub fn forward(&mut self, batch: &Tensor<T>, rng: Option<&mut SeededRng>) -> Result<ForwardPass<T>, NnError> {
        match self.mode {
            Mode::Eval => self.predict(batch),
            Mode::Train => {
                let (pass, moments) = self.run(batch, true, rng)?;
                self.update_running_stats(&moments);
                Ok(pass)
            }
        }
    }

    /// Eval-mode forward pass: dropout off, running batch-norm statistics.
    /// Pure in `(params, batch)`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<ForwardPass<T>, NnError> {
        self.run(batch, false, None).map(|(p, _)| p)
    }

    /// Eval-mode logits computed in chunks of `chunk` examples.
    pub fn predict_logits(&self, batch: &Tensor<T>, chunk: usize) -> Result<Tensor<T>, NnError> {
        Ok(self.predict_chunked(batch, chunk)?.0)
    }

    /// Eval-mode `(logits, penultimate)` computed in chunks.
    pub fn predict_chunked(&self, batch: &Tensor<T>, chunk: usize) -> Result<(Tensor<T>, Tensor<T>), NnError> {
        let n = self.batch_size_of(batch)?;
        let chunk = chunk.max(1);
        let c = self.spec.classes();
        let d = self.spec.penultimate_width();
        let mut logits = Vec::with_capacity(n * c);
        let mut pen = Vec::with_capacity(n * d);
        let per = self.spec.input_len();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let sub = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
            let p = self.predict(&sub)?;
            logits.extend_from_slice(p.logits.data());
            pen.extend_from_slice(p.penultimate.data());
            start = end;
        }
        Ok((Tensor::new(vec![n, c], logits)?, Tensor::new(vec![n, d], pen)?))
    }

    fn update_running_stats(&mut self, moments: &[BatchMoments]) {
        for (i, m) in moments.iter().enumerate() {
            let (Some((mean, var, n)), Some(stats)) = (m, self.bn[i].as_mut()) else {
                continue;
            };
            let momentum = match self.spec.layers[i] {
                LayerSpec::BatchNorm { momentum, .. } => momentum,
                _ => continue,
            };
            let unbias = if *n > 1 { *n as f64 / (*n - 1) as f64 } else { 1.0 };
            for c in 0..mean.len() {
                stats.mean[c] = T::narrow(momentum * stats.mean[c].widen() + (1.0 - momentum) * mean[c]);
                stats.var[c] = T::narrow(momentum * stats.var[c].widen() + (1.0 - momentum) * var[c] * unbias);
            }
        }
    }

    pub(super) fn run(
        &self,
        batch: &Tensor<T>,
        train: bool,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(ForwardPass<T>, Vec<BatchMoments>), NnError> {
        let b = self.batch_size_of(batch)?;
        let mut act: Vec<T> = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut moments = Vec::with_capacity(self.spec.layers.len());
        let mut penultimate = Vec::new();
        let classifier = self.spec.classifier_index();

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            if i == classifier {
                penultimate = act.clone();
            }
            let mut moment = None;
            let cache = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let w = &self.params[i][0];
                    let bias = &self.params[i][1];
                    let out = gemm(&act, w.data(), b, inputs, outputs, Bias::Col(bias.data()));
                    let input = std::mem::replace(&mut act, out);
                    Cache::Dense { input }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => {
                    let g = ConvGeometry::new(in_channels, in_shape[1], in_shape[2], kernel_h, kernel_w, stride, padding)?;
                    let cols = im2col(&act, b, &g);
                    let p = g.positions();
                    let all = gemm(
                        self.params[i][0].data(),
                        &cols,
                        out_channels,
                        g.patch_len(),
                        b * p,
                        Bias::Row(self.params[i][1].data()),
                    );
                    let mut out = Vec::with_capacity(all.len());
                    for ex in 0..b {
                        for c in 0..out_channels {
                            out.extend_from_slice(&all[c * b * p + ex * p..c * b * p + (ex + 1) * p]);
                        }
                    }
                    act = out;
                    Cache::Conv { cols, geom: g }
                }
                LayerSpec::Relu => {
                    for v in act.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                    Cache::Relu { output: act.clone() }
                }
                LayerSpec::MaxPool2 => {
                    let mut shape = vec![b];
                    shape.extend_from_slice(in_shape);
                    let input_len = act.len();
                    let pooled = tensor::maxpool2(&Tensor::new(shape, std::mem::take(&mut act))?)?;
                    act = pooled.output.into_data();
                    Cache::Pool {
                        argmax: pooled.argmax,
                        input_len,
                    }
                }
                LayerSpec::Flatten | LayerSpec::Output { .. } => Cache::Passthrough,
                LayerSpec::Dropout { rate } => {
                    if train && rate > 0.0 {
                        let rng = rng.as_deref_mut().ok_or(NnError::MissingRng { index: i })?;
                        let keep = T::narrow(1.0 / (1.0 - rate));
                        let scale: Vec<T> = (0..act.len())
                            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
                            .collect();
                        for (v, s) in act.iter_mut().zip(&scale) {
                            *v = *v * *s;
                        }
                        Cache::Dropout { scale: Some(scale) }
                    } else {
                        Cache::Dropout { scale: None }
                    }
                }
                LayerSpec::BatchNorm { channels, eps, .. } => {
                    let spatial: usize = in_shape.iter().skip(1).product();
                    let n = b * spatial;
                    let gamma = self.params[i][0].data();
                    let beta = self.params[i][1].data();
                    let (mean, var) = if train {
                        let (mean, var) = channel_moments(&act, b, channels, spatial);
                        moment = Some((mean.clone(), var.clone(), n));
                        (mean, var)
                    } else {
                        let s = self.bn[i].as_ref().ok_or_else(|| NnError::ParamShape(format!("layer {i}: missing statistics")))?;
                        (
                            s.mean.iter().map(|v| v.widen()).collect(),
                            s.var.iter().map(|v| v.widen()).collect(),
                        )
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut normalized = vec![T::zero(); act.len()];
                    for ex in 0..b {
                        for c in 0..channels {
                            let base = (ex * channels + c) * spatial;
                            for s in 0..spatial {
                                let xh = (act[base + s].widen() - mean[c]) * inv_std[c];
                                normalized[base + s] = T::narrow(xh);
                                act[base + s] = T::narrow(gamma[c].widen() * xh + beta[c].widen());
                            }
                        }
                    }
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_stats: train,
                    }
                }
            };
            caches.push(cache);
            moments.push(moment);
        }

        let classes = self.spec.classes();
        let d = self.spec.penultimate_width();
        Ok((
            ForwardPass {
                logits: Tensor::new(vec![b, classes], act)?,
                penultimate: Tensor::new(vec![b, d], penultimate)?,
                batch: b,
                caches,
            },
            moments,
        ))
    }

    /// Reverse-mode gradients of the scalar loss whose logit gradient is
    /// `dlogits`. Any batch averaging must already be folded into
    /// `dlogits`; parameter gradients are summed over the batch.
    pub fn backward(&self, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>, NnError> {
        let b = pass.batch;
        let classes = self.spec.classes();
        if dlogits.shape() != [b, classes] {
            return Err(NnError::CacheMismatch(format!(
                "logit gradient shape {:?}, expected [{b}, {classes}]",
                dlogits.shape()
            )));
        }
        if pass.caches.len() != self.spec.layers.len() {
            return Err(NnError::CacheMismatch("caches come from a different model".into()));
        }
        let mut grads = self.zero_gradients();
        let mut delta: Vec<T> = dlogits.data().to_vec();

        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let need_input_grad = i > 0;
            match (layer, &pass.caches[i]) {
                (LayerSpec::Dense { inputs, outputs }, Cache::Dense { input }) => {
                    let (inputs, outputs) = (*inputs, *outputs);
                    let xt = transpose(input, b, inputs);
                    let dw = gemm(&xt, &delta, inputs, b, outputs, Bias::None);
                    let mut db = vec![0.0f64; outputs];
                    for row in delta.chunks_exact(outputs) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += v.widen();
                        }
                    }
                    grads.layers[i][0] = Tensor::new(vec![inputs, outputs], dw)?;
                    grads.layers[i][1] = Tensor::new(vec![outputs], db.into_iter().map(T::narrow).collect())?;
                    if need_input_grad {
                        let wt = transpose(self.params[i][0].data(), inputs, outputs);
                        delta = gemm(&delta, &wt, b, outputs, inputs, Bias::None);
                    }
                }
                (LayerSpec::Conv2d { out_channels, .. }, Cache::Conv { cols, geom }) => {
                    let co = *out_channels;
                    let p = geom.positions();
                    let k = geom.patch_len();
                    let mut dy_all = vec![T::zero(); co * b * p];
                    for ex in 0..b {
                        for c in 0..co {
                            dy_all[c * b * p + ex * p..c * b * p + (ex + 1) * p]
                                .copy_from_slice(&delta[(ex * co + c) * p..(ex * co + c + 1) * p]);
                        }
                    }
                    let cols_t = transpose(cols, k, b * p);
                    let dk = gemm(&dy_all, &cols_t, co, b * p, k, Bias::None);
                    let db: Vec<T> = dy_all
                        .chunks_exact(b * p)
                        .map(|row| T::narrow(row.iter().map(|v| v.widen()).sum()))
                        .collect();
                    grads.layers[i][0] = Tensor::new(self.params[i][0].shape().to_vec(), dk)?;
                    grads.layers[i][1] = Tensor::new(vec![co], db)?;
                    if need_input_grad {
                        let kt = transpose(self.params[i][0].data(), co, k);
                        let dcols = gemm(&kt, &dy_all, k, co, b * p, Bias::None);
                        delta = col2im(&dcols, b, geom);
                    }
                }
                (LayerSpec::Relu, Cache::Relu { output }) => {
                    for (d, o) in delta.iter_mut().zip(output) {
                        if *o <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
                (LayerSpec::MaxPool2, Cache::Pool { argmax, input_len }) => {
                    delta = tensor::maxpool2_backward(&delta, argmax, *input_len);
                }
                (LayerSpec::Flatten | LayerSpec::Output { .. }, Cache::Passthrough) => {}
                (LayerSpec::Dropout { .. }, Cache::Dropout { scale }) => {
                    if let Some(scale) = scale {
                        for (d, s) in delta.iter_mut().zip(scale) {
                            *d = *d * *s;
                        }
                    }
                }
                (
                    LayerSpec::BatchNorm { channels, .. },
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    let channels = *channels;
                    let spatial: usize = self.shapes[i].iter().skip(1).product();
                    let n = (b * spatial) as f64;
                    let gamma = self.params[i][0].data();
                    let mut dgamma = vec![0.0f64; channels];
                    let mut dbeta = vec![0.0f64; channels];
                    for ex in 0..b {
                        for c in 0..channels {
                            let base = (ex * channels + c) * spatial;
                            for s in 0..spatial {
                                let dy = delta[base + s].widen();
                                dgamma[c] += dy * normalized[base + s].widen();
                                dbeta[c] += dy;
                            }
                        }
                    }
                    if need_input_grad {
                        for ex in 0..b {
                            for c in 0..channels {
                                let base = (ex * channels + c) * spatial;
                                let g = gamma[c].widen() * inv_std[c];
                                for s in 0..spatial {
                                    let dy = delta[base + s].widen();
                                    let dx = if *batch_stats {
                                        g / n * (n * dy - dbeta[c] - normalized[base + s].widen() * dgamma[c])
                                    } else {
                                        g * dy
                                    };
                                    delta[base + s] = T::narrow(dx);
                                }
                            }
                        }
                    }
                    grads.layers[i][0] = Tensor::new(vec![channels], dgamma.into_iter().map(T::narrow).collect())?;
                    grads.layers[i][1] = Tensor::new(vec![channels], dbeta.into_iter().map(T::narrow).collect())?;
                }
                _ => return Err(NnError::CacheMismatch(format!("layer {i} cache does not match its spec"))),
            }
        }
        Ok(grads)
    }
}

fn channel_moments<T: Scalar>(act: &[T], b: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * spatial) as f64;
    let mut mean = vec![0.0f64; channels];
    for ex in 0..b {
        for (c, m) in mean.iter_mut().enumerate() {
            let base = (ex * channels + c) * spatial;
            for v in &act[base..base + spatial] {
                *m += v.widen();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; channels];
    for ex in 0..b {
        for c in 0..channels {
            let base = (ex * channels + c) * spatial;
            for v in &act[base..base + spatial] {
                let d = v.widen() - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
