use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    #[serde(rename = "conv3x3")]
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Gap,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        rate: f64,
    },
    Sigmoid,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => out_channels * in_channels * 9 + out_channels,
            LayerSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    fn weight_shape(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => {
                Some((vec![out_channels, in_channels, 3, 3], vec![out_channels]))
            }
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }
}

/// What a network consumes: decoded images or frozen feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Image,
    Features,
}

/// Per-sample input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum InputShape {
    /// `[channels, h, w]`; spatial size fixed at forward time.
    Spatial {
        channels: usize,
    },
    Flat {
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

/// Activations retained from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> T {
        self.acts.last().expect("non-empty trace").data()[0]
    }
}

/// Ordered layer stack with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: Vec<LayerSpec>,
    input_kind: InputKind,
    input_shape: InputShape,
    params: Vec<T>,
    offsets: Vec<usize>,
    mode: Mode,
    seed: u64,
    forward_calls: u64,
    cache: Option<Vec<Trace<T>>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Abstract {
    Spatial(usize),
    Flat(usize),
}

fn check_compat(spec: &[LayerSpec], input: InputShape) -> Result<()> {
    let mut shape = match input {
        InputShape::Spatial { channels } => Abstract::Spatial(channels),
        InputShape::Flat { dim } => Abstract::Flat(dim),
    };
    for (i, layer) in spec.iter().enumerate() {
        let current = shape;
        let bad =
            |expected: String| Error::shape(format!("layer {i} ({layer:?}) input {expected}"), format!("{current:?}"));
        shape = match (*layer, current) {
            (LayerSpec::Conv3x3 { in_channels, out_channels }, Abstract::Spatial(c)) if c == in_channels => {
                Abstract::Spatial(out_channels)
            }
            (LayerSpec::Conv3x3 { in_channels, .. }, _) => return Err(bad(format!("Spatial({in_channels})"))),
            (LayerSpec::MaxPool2x2, Abstract::Spatial(c)) => Abstract::Spatial(c),
            (LayerSpec::MaxPool2x2, _) => return Err(bad("Spatial".into())),
            (LayerSpec::Gap, Abstract::Spatial(c)) => Abstract::Flat(c),
            (LayerSpec::Gap, _) => return Err(bad("Spatial".into())),
            (LayerSpec::Dense { inputs, outputs }, Abstract::Flat(n)) if n == inputs => Abstract::Flat(outputs),
            (LayerSpec::Dense { inputs, .. }, _) => return Err(bad(format!("Flat({inputs})"))),
            (LayerSpec::Dropout { rate }, s) => {
                layers::check_rate(rate)?;
                s
            }
            (LayerSpec::Relu | LayerSpec::Sigmoid, s) => s,
        };
    }
    if shape != Abstract::Flat(1) {
        return Err(Error::shape("network output Flat(1)", format!("{shape:?}")));
    }
    Ok(())
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Network<T> {
    /// Zero-initialized network. Fails if adjacent layers are incompatible or
    /// the stack does not end in a single unit.
    pub fn new(spec: Vec<LayerSpec>, input_kind: InputKind, input_shape: InputShape) -> Result<Self> {
        check_compat(&spec, input_shape)?;
        let mut offsets = Vec::with_capacity(spec.len() + 1);
        let mut total = 0;
        for l in &spec {
            offsets.push(total);
            total += l.param_count();
        }
        offsets.push(total);
        Ok(Self {
            spec,
            input_kind,
            input_shape,
            params: vec![T::default(); total],
            offsets,
            mode: Mode::Train,
            seed: 0,
            forward_calls: 0,
            cache: None,
        })
    }

    /// He-uniform for weights feeding a ReLU path, Glorot-uniform for a dense
    /// layer feeding the sigmoid; biases zero. Also seeds the dropout stream.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.seed = mix(seed, 0xD80F);
        self.forward_calls = 0;
        for (i, layer) in self.spec.iter().enumerate() {
            let (fan_in, fan_out, weights) = match *layer {
                LayerSpec::Conv3x3 { in_channels, out_channels } => {
                    (in_channels * 9, out_channels * 9, out_channels * in_channels * 9)
                }
                LayerSpec::Dense { inputs, outputs } => (inputs, outputs, inputs * outputs),
                _ => continue,
            };
            let feeds_sigmoid = self.spec[i + 1..]
                .iter()
                .find(|l| !matches!(l, LayerSpec::Dropout { .. }))
                .is_some_and(|l| *l == LayerSpec::Sigmoid);
            let limit =
                if feeds_sigmoid { (6.0 / (fan_in + fan_out) as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
            let start = self.offsets[i];
            for p in &mut self.params[start..start + weights] {
                *p = T::from_f64(rng.random_range(-limit..limit));
            }
            for p in &mut self.params[start + weights..self.offsets[i + 1]] {
                *p = T::default();
            }
        }
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn input_kind(&self) -> InputKind {
        self.input_kind
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("{} parameters", self.params.len()), format!("{}", params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Reset the dropout stream without touching parameters.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = mix(seed, 0xD80F);
        self.forward_calls = 0;
    }

    /// Per-parameter-block layout, in parameter order.
    pub fn tensor_table(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        for (i, layer) in self.spec.iter().enumerate() {
            if let Some((w, b)) = layer.weight_shape() {
                let wlen: usize = w.iter().product();
                out.push(TensorEntry { name: format!("layer{i}.weight"), shape: w, offset: self.offsets[i] });
                out.push(TensorEntry { name: format!("layer{i}.bias"), shape: b, offset: self.offsets[i] + wlen });
            }
        }
        out
    }

    /// Stable digest of the layer stack and input contract.
    pub fn spec_hash(&self) -> String {
        spec_hash(&self.spec, self.input_kind, self.input_shape)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let ok = match (self.input_shape, x.shape()) {
            (InputShape::Spatial { channels }, &[c, _, _]) => c == channels,
            (InputShape::Flat { dim }, &[n]) => n == dim,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(format!("{:?}", self.input_shape), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    fn layer_params(&self, i: usize) -> (&[T], &[T]) {
        let (w, _) = self.spec[i].weight_shape().expect("parametric layer");
        let wlen: usize = w.iter().product();
        let start = self.offsets[i];
        (&self.params[start..start + wlen], &self.params[start + wlen..self.offsets[i + 1]])
    }

    /// Forward one sample. `sample_seed` drives dropout in train mode.
    pub fn forward_sample(&self, input: &Tensor<T>, mode: Mode, sample_seed: u64) -> Result<Trace<T>> {
        self.check_input(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut acts = Vec::with_capacity(self.spec.len() + 1);
        let mut aux = Vec::with_capacity(self.spec.len());
        acts.push(input.clone());
        for (i, layer) in self.spec.iter().enumerate() {
            let x = acts.last().expect("input present");
            let (y, a) = match *layer {
                LayerSpec::Conv3x3 { in_channels, out_channels } => {
                    let (_, h, w) = x.chw()?;
                    let (wt, b) = self.layer_params(i);
                    let out = layers::conv3x3_raw(x.data(), in_channels, h, w, wt, b, out_channels);
                    (Tensor::new(vec![out_channels, h, w], out)?, Aux::None)
                }
                LayerSpec::MaxPool2x2 => {
                    let (y, arg) = layers::maxpool2x2(x)?;
                    (y, Aux::Argmax(arg))
                }
                LayerSpec::Relu => (layers::relu(x), Aux::None),
                LayerSpec::Gap => (layers::global_avg_pool(x)?, Aux::None),
                LayerSpec::Dense { outputs, .. } => {
                    let (wt, b) = self.layer_params(i);
                    (Tensor::new(vec![outputs], layers::dense_raw(x.data(), wt, b, outputs))?, Aux::None)
                }
                LayerSpec::Dropout { rate } => {
                    let (y, mask) = layers::dropout(x, rate, mode == Mode::Train, &mut rng)?;
                    (y, mask.map_or(Aux::None, Aux::Mask))
                }
                LayerSpec::Sigmoid => (layers::sigmoid(x), Aux::None),
            };
            acts.push(y);
            aux.push(a);
        }
        Ok(Trace { acts, aux })
    }

    /// Side of every ReLU kink and winner of every max-pool window taken by
    /// `trace`. Two traces with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self, trace: &Trace<T>) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, layer) in self.spec.iter().enumerate() {
            match (layer, &trace.aux[i]) {
                (LayerSpec::Relu, _) => out.extend(trace.acts[i].data().iter().map(|v| usize::from(v.to_f64() > 0.0))),
                (LayerSpec::MaxPool2x2, Aux::Argmax(a)) => out.extend_from_slice(a),
                _ => {}
            }
        }
        out
    }

    /// Parameter gradient of `upstream · output` for one traced sample.
    pub fn backward_sample(&self, trace: &Trace<T>, upstream: f64) -> Result<Vec<f64>> {
        let mut grads = vec![0.0f64; self.params.len()];
        let mut g: Tensor<T> = Tensor::new(vec![1], vec![T::from_f64(upstream)])?;
        for i in (0..self.spec.len()).rev() {
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            g = match self.spec[i] {
                LayerSpec::Conv3x3 { in_channels, out_channels } => {
                    let (_, h, w) = x.chw()?;
                    let (wt, _) = self.layer_params(i);
                    let (gx, gw, gb) =
                        layers::conv3x3_backward_impl(x.data(), in_channels, h, w, wt, out_channels, g.data(), i > 0);
                    let start = self.offsets[i];
                    grads[start..start + gw.len()].copy_from_slice(&gw);
                    grads[start + gw.len()..self.offsets[i + 1]].copy_from_slice(&gb);
                    if i == 0 {
                        break;
                    }
                    Tensor::new(x.shape().to_vec(), gx.into_iter().map(T::from_f64).collect())?
                }
                LayerSpec::MaxPool2x2 => match &trace.aux[i] {
                    Aux::Argmax(arg) => layers::maxpool2x2_backward(&g, arg, x.shape())?,
                    _ => return Err(Error::State("pool trace missing argmax".into())),
                },
                LayerSpec::Relu => layers::relu_backward(x, &g),
                LayerSpec::Gap => layers::global_avg_pool_backward(x.shape(), &g)?,
                LayerSpec::Dense { .. } => {
                    let (wt, _) = self.layer_params(i);
                    let (gx, gw, gb) = layers::dense_backward_raw(x.data(), wt, g.data());
                    let start = self.offsets[i];
                    grads[start..start + gw.len()].copy_from_slice(&gw);
                    grads[start + gw.len()..self.offsets[i + 1]].copy_from_slice(&gb);
                    if i == 0 {
                        break;
                    }
                    Tensor::new(x.shape().to_vec(), gx.into_iter().map(T::from_f64).collect())?
                }
                LayerSpec::Dropout { .. } => match &trace.aux[i] {
                    Aux::Mask(mask) => layers::apply_mask(&g, mask),
                    _ => g,
                },
                LayerSpec::Sigmoid => layers::sigmoid_backward(y, &g),
            };
        }
        Ok(grads)
    }

    /// Forward a batch in the current mode, retaining activations for
    /// [`Network::backward`]. Returns one probability per sample, in order.
    pub fn forward(&mut self, batch: &[Tensor<T>]) -> Result<Vec<T>> {
        let call = self.forward_calls;
        self.forward_calls += 1;
        let base = mix(self.seed, call);
        let mode = self.mode;
        let net = &*self;
        let traces: Vec<Trace<T>> =
            exec::map_range(batch.len(), |i| net.forward_sample(&batch[i], mode, mix(base, i as u64)))
                .into_iter()
                .collect::<Result<_>>()?;
        let out = traces.iter().map(Trace::output).collect();
        self.cache = Some(traces);
        Ok(out)
    }

    /// Sum over the cached batch of `upstream[i] · d output_i / d params`.
    /// Consumes the cache.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Vec<T>> {
        let traces =
            self.cache.take().ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        if traces.len() != upstream.len() {
            return Err(Error::shape(format!("{} upstream gradients", traces.len()), format!("{}", upstream.len())));
        }
        let per_sample: Vec<Vec<f64>> =
            exec::map_range(traces.len(), |i| self.backward_sample(&traces[i], upstream[i]))
                .into_iter()
                .collect::<Result<_>>()?;
        let mut total = vec![0.0f64; self.params.len()];
        for g in &per_sample {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok(total.into_iter().map(T::from_f64).collect())
    }

    /// Eval-mode probabilities without touching the cache.
    pub fn predict(&self, batch: &[Tensor<T>]) -> Result<Vec<T>> {
        exec::map(batch, |x| self.forward_sample(x, Mode::Eval, 0).map(|t| t.output())).into_iter().collect()
    }
}

pub(crate) fn spec_hash(spec: &[LayerSpec], kind: InputKind, shape: InputShape) -> String {
    let canonical = serde_json::to_string(&(spec, kind, shape)).expect("spec serializes");
    crate::hex_digest(canonical.as_bytes(), 16)
}

/// Three conv/relu/pool blocks (16, 32, 64 channels), global average pool,
/// dense 64 + relu + dropout, dense 1 + sigmoid.
pub fn build_small_cnn() -> Network<f32> {
    build_small_cnn_with(DEFAULT_DROPOUT).expect("default small CNN is well formed")
}

pub fn build_small_cnn_with<T: Scalar>(dropout: f64) -> Result<Network<T>> {
    let mut spec = Vec::new();
    let mut c = 3;
    for out in [16, 32, 64] {
        spec.push(LayerSpec::Conv3x3 { in_channels: c, out_channels: out });
        spec.push(LayerSpec::Relu);
        spec.push(LayerSpec::MaxPool2x2);
        c = out;
    }
    spec.extend([
        LayerSpec::Gap,
        LayerSpec::Dense { inputs: 64, outputs: 64 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { inputs: 64, outputs: 1 },
        LayerSpec::Sigmoid,
    ]);
    Network::new(spec, InputKind::Image, InputShape::Spatial { channels: 3 })
}

fn head_layers(feature_dim: usize, dropout: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { inputs: feature_dim, outputs: 64 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { inputs: 64, outputs: 1 },
        LayerSpec::Sigmoid,
    ]
}

/// Head over flat (already pooled) feature vectors.
pub fn build_head<T: Scalar>(feature_dim: usize, dropout: f64) -> Result<Network<T>> {
    if feature_dim == 0 {
        return Err(Error::Argument("feature_dim must be at least 1".into()));
    }
    Network::new(head_layers(feature_dim, dropout), InputKind::Features, InputShape::Flat { dim: feature_dim })
}

/// Head over `[channels, h, w]` feature maps: global average pool first.
pub fn build_head_spatial<T: Scalar>(channels: usize, dropout: f64) -> Result<Network<T>> {
    if channels == 0 {
        return Err(Error::Argument("channels must be at least 1".into()));
    }
    let mut spec = vec![LayerSpec::Gap];
    spec.extend(head_layers(channels, dropout));
    Network::new(spec, InputKind::Features, InputShape::Spatial { channels })
}
