use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnetError;
use crate::rng;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same-padded (`kernel / 2`) square convolution.
    Conv { kernel: usize, stride: usize, out_channels: usize },
    LeakyRelu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool,
    Dense { out_features: usize },
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Index of the weight tensor; the bias follows it.
    pub param: Option<usize>,
}

fn infer_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, NnetError> {
    let mismatch = |expected: Vec<usize>| NnetError::ShapeMismatch { expected, got: input.to_vec() };
    match *spec {
        LayerSpec::Conv { kernel, stride, out_channels } => {
            let [_, h, w] = input[..] else { return Err(mismatch(vec![0, 0, 0])) };
            if kernel == 0 || stride == 0 || out_channels == 0 || kernel % 2 == 0 {
                return Err(NnetError::InvalidLayer(format!("{spec:?}")));
            }
            let pad = kernel / 2;
            let ho = (h + 2 * pad - kernel) / stride + 1;
            let wo = (w + 2 * pad - kernel) / stride + 1;
            Ok(vec![out_channels, ho, wo])
        }
        LayerSpec::MaxPool => {
            let [c, h, w] = input[..] else { return Err(mismatch(vec![0, 0, 0])) };
            if h < 2 || w < 2 {
                return Err(mismatch(vec![c, 2, 2]));
            }
            Ok(vec![c, h / 2, w / 2])
        }
        LayerSpec::Dense { out_features } => {
            let [_] = input[..] else { return Err(mismatch(vec![input.iter().product()])) };
            if out_features == 0 {
                return Err(NnetError::InvalidLayer(format!("{spec:?}")));
            }
            Ok(vec![out_features])
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::LeakyRelu | LayerSpec::Sigmoid => Ok(input.to_vec()),
    }
}

fn param_shapes(spec: &LayerSpec, input: &[usize]) -> Option<(usize, usize, usize)> {
    // (fan_in, weight count, bias count)
    match *spec {
        LayerSpec::Conv { kernel, out_channels, .. } => {
            let fan_in = input[0] * kernel * kernel;
            Some((fan_in, out_channels * fan_in, out_channels))
        }
        LayerSpec::Dense { out_features } => Some((input[0], out_features * input[0], out_features)),
        _ => None,
    }
}

/// Sequential trunk with optional parallel heads that all read the trunk
/// output. Without heads the trunk output is the single network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) trunk: Vec<Layer>,
    pub(crate) heads: Vec<Vec<Layer>>,
    pub(crate) params: Vec<Vec<T>>,
    pub(crate) seed: u64,
}

/// Layer specs of a network, the part that is persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<Vec<LayerSpec>>,
}

impl<T: Real> Network<T> {
    /// Builds a sequential network with He-uniform weights and zero biases.
    pub fn sequential(input_shape: &[usize], layers: &[LayerSpec], seed: u64) -> Result<Self, NnetError> {
        Self::from_architecture(&Architecture { input_shape: input_shape.to_vec(), trunk: layers.to_vec(), heads: vec![] }, seed)
    }

    pub fn from_architecture(arch: &Architecture, seed: u64) -> Result<Self, NnetError> {
        let mut params = Vec::new();
        let build = |specs: &[LayerSpec], mut shape: Vec<usize>, params: &mut Vec<Vec<T>>| -> Result<(Vec<Layer>, Vec<usize>), NnetError> {
            let mut layers = Vec::with_capacity(specs.len());
            for spec in specs {
                let out = infer_shape(spec, &shape)?;
                let param = param_shapes(spec, &shape).map(|(fan_in, nw, nb)| {
                    let idx = params.len();
                    let mut r = rng::stream(seed, idx as u64, "he-uniform");
                    let limit = (6.0 / fan_in as f64).sqrt();
                    params.push((0..nw).map(|_| T::from_f64_lossy(r.random_range(-limit..limit))).collect());
                    params.push(vec![T::zero(); nb]);
                    idx
                });
                layers.push(Layer { spec: *spec, in_shape: shape.clone(), out_shape: out.clone(), param });
                shape = out;
            }
            Ok((layers, shape))
        };
        if arch.input_shape.is_empty() || arch.input_shape.contains(&0) {
            return Err(NnetError::InvalidLayer(format!("input shape {:?}", arch.input_shape)));
        }
        let (trunk, trunk_out) = build(&arch.trunk, arch.input_shape.clone(), &mut params)?;
        let mut heads = Vec::new();
        for h in &arch.heads {
            heads.push(build(h, trunk_out.clone(), &mut params)?.0);
        }
        Ok(Self { input_shape: arch.input_shape.clone(), trunk, heads, params, seed })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            trunk: self.trunk.iter().map(|l| l.spec).collect(),
            heads: self.heads.iter().map(|h| h.iter().map(|l| l.spec).collect()).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output shape (without batch dimension) of every output.
    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        let trunk_out = self.trunk.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| self.input_shape.clone());
        if self.heads.is_empty() {
            vec![trunk_out]
        } else {
            self.heads.iter().map(|h| h.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| trunk_out.clone())).collect()
        }
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
            params: self.params.iter().map(|p| p.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect()).collect(),
            seed: self.seed,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize, NnetError> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![input.batch()];
            expected.extend(&self.input_shape);
            return Err(NnetError::ShapeMismatch { expected, got: input.shape().to_vec() });
        }
        Ok(input.batch())
    }

    /// Inference over a batch `[N, ...input_shape]`; one tensor per output.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, NnetError> {
        let n = self.check_input(input)?;
        let mut x = input.data().to_vec();
        for layer in &self.trunk {
            x = layer_forward(layer, &self.params, &x, n, None);
        }
        let trunk_out = self.trunk.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| self.input_shape.clone());
        if self.heads.is_empty() {
            return Ok(vec![batch_tensor(n, &trunk_out, x)]);
        }
        Ok(self
            .heads
            .iter()
            .map(|head| {
                let mut y = x.clone();
                for layer in head {
                    y = layer_forward(layer, &self.params, &y, n, None);
                }
                let shape = head.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| trunk_out.clone());
                batch_tensor(n, &shape, y)
            })
            .collect())
    }

    /// Forward pass that records what backpropagation needs.
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Trace<T>), NnetError> {
        let n = self.check_input(input)?;
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        let mut x = input.data().to_vec();
        for layer in &self.trunk {
            let mut cache = Cache::None;
            x = layer_forward(layer, &self.params, &x, n, Some(&mut cache));
            trunk_caches.push(cache);
        }
        let trunk_out = self.trunk.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| self.input_shape.clone());
        let mut outputs = Vec::new();
        let mut head_caches = Vec::new();
        if self.heads.is_empty() {
            outputs.push(batch_tensor(n, &trunk_out, x));
        } else {
            for head in &self.heads {
                let mut caches = Vec::with_capacity(head.len());
                let mut y = x.clone();
                for layer in head {
                    let mut cache = Cache::None;
                    y = layer_forward(layer, &self.params, &y, n, Some(&mut cache));
                    caches.push(cache);
                }
                let shape = head.last().map(|l| l.out_shape.clone()).unwrap_or_else(|| trunk_out.clone());
                outputs.push(batch_tensor(n, &shape, y));
                head_caches.push(caches);
            }
        }
        Ok((outputs, Trace { batch: n, trunk: trunk_caches, heads: head_caches }))
    }

    /// Accumulates parameter gradients into `grads` given output gradients.
    pub fn backward(&self, trace: Trace<T>, d_outputs: &[Tensor<T>], grads: &mut [Vec<T>]) -> Result<(), NnetError> {
        let n = trace.batch;
        let expected_outputs = self.heads.len().max(1);
        if d_outputs.len() != expected_outputs || grads.len() != self.params.len() {
            return Err(NnetError::ShapeMismatch { expected: vec![expected_outputs], got: vec![d_outputs.len()] });
        }
        let trunk_len: usize = self.trunk.last().map(|l| l.out_shape.iter().product()).unwrap_or(self.input_shape.iter().product());
        let mut d_trunk;
        if self.heads.is_empty() {
            d_trunk = d_outputs[0].data().to_vec();
        } else {
            d_trunk = vec![T::zero(); n * trunk_len];
            for ((head, caches), d_out) in self.heads.iter().zip(trace.heads).zip(d_outputs) {
                let mut d = d_out.data().to_vec();
                for (layer, cache) in head.iter().zip(caches).rev() {
                    d = layer_backward(layer, &self.params, cache, &d, n, grads);
                }
                for (a, b) in d_trunk.iter_mut().zip(&d) {
                    *a += *b;
                }
            }
        }
        for (layer, cache) in self.trunk.iter().zip(trace.trunk).rev() {
            d_trunk = layer_backward(layer, &self.params, cache, &d_trunk, n, grads);
        }
        Ok(())
    }
}

fn batch_tensor<T: Real>(n: usize, shape: &[usize], data: Vec<T>) -> Tensor<T> {
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("layer output matches its inferred shape")
}

/// Per-layer values saved during [`Network::forward_train`].
#[derive(Debug)]
pub struct Trace<T> {
    batch: usize,
    trunk: Vec<Cache<T>>,
    heads: Vec<Vec<Cache<T>>>,
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Cols(Vec<T>),
    Input(Vec<T>),
    Output(Vec<T>),
    Argmax(Vec<u32>),
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let pad = k / 2;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let pad = k / 2;
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn layer_forward<T: Real>(layer: &Layer, params: &[Vec<T>], x: &[T], n: usize, cache: Option<&mut Cache<T>>) -> Vec<T> {
    let in_len: usize = layer.in_shape.iter().product();
    let out_len: usize = layer.out_shape.iter().product();
    match layer.spec {
        LayerSpec::Conv { kernel, stride, out_channels } => {
            let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (ho, wo) = (layer.out_shape[1], layer.out_shape[2]);
            let kk = c * kernel * kernel;
            let p = ho * wo;
            let idx = layer.param.expect("conv has parameters");
            let (weights, bias) = (&params[idx], &params[idx + 1]);
            let mut out = vec![T::zero(); n * out_len];
            let mut all_cols = vec![T::zero(); n * kk * p];
            for s in 0..n {
                let cols = &mut all_cols[s * kk * p..(s + 1) * kk * p];
                im2col(&x[s * in_len..(s + 1) * in_len], c, h, w, kernel, stride, ho, wo, cols);
                let y = &mut out[s * out_len..(s + 1) * out_len];
                for (co, row) in y.chunks_mut(p).enumerate() {
                    row.fill(bias[co]);
                }
                T::gemm(out_channels, kk, p, weights, kk as isize, 1, cols, p as isize, 1, T::one(), y, p as isize, 1);
            }
            if let Some(cache) = cache {
                *cache = Cache::Cols(all_cols);
            }
            out
        }
        LayerSpec::Dense { out_features } => {
            let idx = layer.param.expect("dense has parameters");
            let (weights, bias) = (&params[idx], &params[idx + 1]);
            let mut out = vec![T::zero(); n * out_features];
            for row in out.chunks_mut(out_features) {
                row.copy_from_slice(bias);
            }
            T::gemm(n, in_len, out_features, x, in_len as isize, 1, weights, 1, in_len as isize, T::one(), &mut out, out_features as isize, 1);
            if let Some(cache) = cache {
                *cache = Cache::Input(x.to_vec());
            }
            out
        }
        LayerSpec::LeakyRelu => {
            let slope = T::from_f64_lossy(LEAKY_SLOPE);
            let out = x.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
            if let Some(cache) = cache {
                *cache = Cache::Input(x.to_vec());
            }
            out
        }
        LayerSpec::Sigmoid => {
            let out: Vec<T> = x.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
            if let Some(cache) = cache {
                *cache = Cache::Output(out.clone());
            }
            out
        }
        LayerSpec::MaxPool => {
            let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (ho, wo) = (layer.out_shape[1], layer.out_shape[2]);
            let mut out = vec![T::zero(); n * out_len];
            let mut argmax = if cache.is_some() { vec![0u32; n * out_len] } else { Vec::new() };
            for s in 0..n {
                let xs = &x[s * in_len..(s + 1) * in_len];
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let base = ci * h * w + 2 * oy * w + 2 * ox;
                            let mut best = base;
                            for cand in [base + 1, base + w, base + w + 1] {
                                if xs[cand] > xs[best] {
                                    best = cand;
                                }
                            }
                            let o = s * out_len + (ci * ho + oy) * wo + ox;
                            out[o] = xs[best];
                            if !argmax.is_empty() {
                                argmax[o] = best as u32;
                            }
                        }
                    }
                }
            }
            if let Some(cache) = cache {
                *cache = Cache::Argmax(argmax);
            }
            out
        }
        LayerSpec::Flatten => x.to_vec(),
    }
}

fn layer_backward<T: Real>(layer: &Layer, params: &[Vec<T>], cache: Cache<T>, dy: &[T], n: usize, grads: &mut [Vec<T>]) -> Vec<T> {
    let in_len: usize = layer.in_shape.iter().product();
    let out_len: usize = layer.out_shape.iter().product();
    match (layer.spec, cache) {
        (LayerSpec::Conv { kernel, stride, out_channels }, Cache::Cols(all_cols)) => {
            let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (ho, wo) = (layer.out_shape[1], layer.out_shape[2]);
            let kk = c * kernel * kernel;
            let p = ho * wo;
            let idx = layer.param.expect("conv has parameters");
            let weights = &params[idx];
            let mut dx = vec![T::zero(); n * in_len];
            let mut dcols = vec![T::zero(); kk * p];
            for s in 0..n {
                let cols = &all_cols[s * kk * p..(s + 1) * kk * p];
                let d = &dy[s * out_len..(s + 1) * out_len];
                T::gemm(out_channels, p, kk, d, p as isize, 1, cols, 1, p as isize, T::one(), &mut grads[idx], kk as isize, 1);
                for (co, row) in d.chunks(p).enumerate() {
                    let sum: T = row.iter().copied().sum();
                    grads[idx + 1][co] += sum;
                }
                T::gemm(kk, out_channels, p, weights, 1, kk as isize, d, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, c, h, w, kernel, stride, ho, wo, &mut dx[s * in_len..(s + 1) * in_len]);
            }
            dx
        }
        (LayerSpec::Dense { out_features }, Cache::Input(x)) => {
            let idx = layer.param.expect("dense has parameters");
            T::gemm(out_features, n, in_len, dy, 1, out_features as isize, &x, in_len as isize, 1, T::one(), &mut grads[idx], in_len as isize, 1);
            for row in dy.chunks(out_features) {
                for (g, &v) in grads[idx + 1].iter_mut().zip(row) {
                    *g += v;
                }
            }
            let mut dx = vec![T::zero(); n * in_len];
            T::gemm(n, out_features, in_len, dy, out_features as isize, 1, &params[idx], in_len as isize, 1, T::zero(), &mut dx, in_len as isize, 1);
            dx
        }
        (LayerSpec::LeakyRelu, Cache::Input(x)) => {
            let slope = T::from_f64_lossy(LEAKY_SLOPE);
            x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { d * slope }).collect()
        }
        (LayerSpec::Sigmoid, Cache::Output(y)) => y.iter().zip(dy).map(|(&s, &d)| d * s * (T::one() - s)).collect(),
        (LayerSpec::MaxPool, Cache::Argmax(argmax)) => {
            let mut dx = vec![T::zero(); n * in_len];
            for s in 0..n {
                for o in 0..out_len {
                    dx[s * in_len + argmax[s * out_len + o] as usize] += dy[s * out_len + o];
                }
            }
            dx
        }
        (LayerSpec::Flatten, _) => dy.to_vec(),
        (spec, _) => unreachable!("missing forward cache for {spec:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::<f32>::sequential(&[3], &[LayerSpec::Dense { out_features: 3 }], 1).unwrap();
        net.params_mut()[0] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap()[0].data(), x.data());
    }

    #[test]
    fn sigmoid_of_zero() {
        let net = Network::<f32>::sequential(&[4], &[LayerSpec::Sigmoid], 1).unwrap();
        let out = net.forward(&Tensor::zeros(vec![1, 4])).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut net =
            Network::<f32>::sequential(&[1, 5, 5], &[LayerSpec::Conv { kernel: 3, stride: 1, out_channels: 1 }], 1).unwrap();
        net.params_mut()[0] = vec![1.0; 9];
        let out = net.forward(&Tensor::new(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap()).unwrap();
        let y = out[0].data();
        assert_eq!(y[2 * 5 + 2], 9.0);
        assert_eq!(y[0], 4.0);
    }

    #[test]
    fn shape_errors() {
        assert!(Network::<f32>::sequential(&[1, 4, 4], &[LayerSpec::Dense { out_features: 2 }], 0).is_err());
        let net = Network::<f32>::sequential(&[2], &[LayerSpec::Sigmoid], 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(vec![1, 3])), Err(NnetError::ShapeMismatch { .. })));
    }

    #[test]
    fn strided_conv_and_pool_shapes() {
        let net = Network::<f32>::sequential(
            &[3, 9, 9],
            &[LayerSpec::Conv { kernel: 3, stride: 2, out_channels: 4 }, LayerSpec::MaxPool, LayerSpec::Flatten],
            0,
        )
        .unwrap();
        assert_eq!(net.output_shapes(), vec![vec![16]]);
    }
}
