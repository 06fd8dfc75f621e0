//! Compact convolutional classifier with manual backpropagation.
//!
//! Production training runs in f32; gradient verification instantiates the
//! same model in f64 (`Model::to_f64`) so finite-difference checks are not
//! drowned by single-precision rounding. Convolutions go through im2col and
//! a GEMM; everything is single-threaded and deterministic per seed.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub trait NetFloat:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn to_f64(self) -> f64;
}

impl NetFloat for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl NetFloat for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("invalid optimizer config: {0}")]
    Optim(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("metric evaluation failed: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Batched image tensor: (batch, channels, height, width).
#[derive(Debug, Clone)]
pub struct Tensor4<F: NetFloat> {
    pub data: Array4<F>,
}

impl<F: NetFloat> Tensor4<F> {
    pub fn new(data: Array4<F>) -> Result<Self, NetError> {
        let dim = data.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 || dim.3 == 0 {
            return Err(NetError::Shape {
                layer: 0,
                msg: format!("zero dimension in input {dim:?}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Shape {
                layer: 0,
                msg: "non-finite entry in input tensor".to_string(),
            });
        }
        Ok(Self { data })
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Relu,
    Tanh,
    Flatten,
    Dense {
        units: usize,
    },
    /// Dense projection to one logit followed by a sigmoid.
    SigmoidHead,
    /// Dense projection to `classes` logits followed by a softmax.
    SoftmaxHead {
        classes: usize,
    },
}

impl LayerSpec {
    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SigmoidHead | LayerSpec::SoftmaxHead { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Sigmoid,
    Softmax(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        // Published training hyperparameters.
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            l2: 5e-4,
            batch_size: 128,
            epochs: 30,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.learning_rate < 0.0 {
            return Err(NetError::Optim("learning_rate must be >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::Optim("momentum must be in [0, 1)".to_string()));
        }
        if self.l2 < 0.0 {
            return Err(NetError::Optim("l2 must be >= 0".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NetError::Optim("batch_size and epochs must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Parameter pair stored flat; shape bookkeeping lives in the layer.
#[derive(Debug, Clone, PartialEq)]
struct Params<F: NetFloat> {
    w: Vec<F>,
    b: Vec<F>,
}

#[derive(Debug, Clone)]
enum Activation<F: NetFloat> {
    A4(Array4<F>),
    A2(Array2<F>),
}

#[derive(Debug)]
struct LayerCache<F: NetFloat> {
    input: Activation<F>,
    /// Flat per-channel input index of each max, for maxpool only.
    argmax: Option<Array4<usize>>,
}

/// Full model state: architecture, parameters, optimizer velocity,
/// epoch counter, and the RNG that drives init and epoch shuffling.
#[derive(Debug, Clone)]
pub struct Model<F: NetFloat> {
    specs: Vec<LayerSpec>,
    input_shape: (usize, usize, usize),
    /// One entry per spec; None for parameterless layers.
    params: Vec<Option<Params<F>>>,
    velocity: Vec<Option<Params<F>>>,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

/// Gradients mirror the parameter layout exactly.
#[derive(Debug, Clone)]
pub struct Gradients<F: NetFloat> {
    layers: Vec<Option<Params<F>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ShapeTrace {
    spatial: Option<(usize, usize, usize)>,
    flat: Option<usize>,
}

/// Shape of each parametric layer's weight, derived from specs.
#[derive(Debug, Clone, PartialEq, Eq)]
enum WeightShape {
    Conv {
        out: usize,
        cin: usize,
        kernel: usize,
    },
    Dense {
        out: usize,
        cin: usize,
    },
}

impl WeightShape {
    fn w_len(&self) -> usize {
        match *self {
            WeightShape::Conv { out, cin, kernel } => out * cin * kernel * kernel,
            WeightShape::Dense { out, cin } => out * cin,
        }
    }

    fn b_len(&self) -> usize {
        match *self {
            WeightShape::Conv { out, .. } | WeightShape::Dense { out, .. } => out,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            WeightShape::Conv { cin, kernel, .. } => cin * kernel * kernel,
            WeightShape::Dense { cin, .. } => cin,
        }
    }
}

/// Walks the spec list, validating composition and returning per-layer
/// weight shapes (None for parameterless layers).
fn trace_shapes(
    specs: &[LayerSpec],
    input: (usize, usize, usize),
) -> Result<Vec<Option<WeightShape>>, NetError> {
    let n_heads = specs.iter().filter(|s| s.is_head()).count();
    if n_heads != 1 || !specs.last().map(LayerSpec::is_head).unwrap_or(false) {
        return Err(NetError::Arch(format!(
            "expected exactly one head, last; found {n_heads} head(s)"
        )));
    }
    let mut shape = ShapeTrace {
        spatial: Some(input),
        flat: None,
    };
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let err = |msg: String| NetError::Shape { layer: i, msg };
        match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = shape
                    .spatial
                    .ok_or_else(|| err("conv requires a spatial input".to_string()))?;
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(err("conv parameters must be >= 1".to_string()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(err(format!(
                        "kernel {kernel} exceeds padded input {}x{}",
                        h + 2 * padding,
                        w + 2 * padding
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                shape.spatial = Some((out_channels, oh, ow));
                out.push(Some(WeightShape::Conv {
                    out: out_channels,
                    cin: c,
                    kernel,
                }));
            }
            LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size } => {
                let (c, h, w) = shape
                    .spatial
                    .ok_or_else(|| err("pool requires a spatial input".to_string()))?;
                if size == 0 || h < size || w < size {
                    return Err(err(format!("pool size {size} too large for {h}x{w}")));
                }
                shape.spatial = Some((c, h / size, w / size));
                out.push(None);
            }
            LayerSpec::Relu | LayerSpec::Tanh => out.push(None),
            LayerSpec::Flatten => {
                let (c, h, w) = shape
                    .spatial
                    .ok_or_else(|| err("flatten requires a spatial input".to_string()))?;
                shape = ShapeTrace {
                    spatial: None,
                    flat: Some(c * h * w),
                };
                out.push(None);
            }
            LayerSpec::Dense { units } => {
                let cin = shape
                    .flat
                    .ok_or_else(|| err("dense requires a flattened input".to_string()))?;
                if units == 0 {
                    return Err(err("dense units must be >= 1".to_string()));
                }
                shape.flat = Some(units);
                out.push(Some(WeightShape::Dense { out: units, cin }));
            }
            LayerSpec::SigmoidHead => {
                let cin = shape
                    .flat
                    .ok_or_else(|| err("head requires a flattened input".to_string()))?;
                out.push(Some(WeightShape::Dense { out: 1, cin }));
            }
            LayerSpec::SoftmaxHead { classes } => {
                let cin = shape
                    .flat
                    .ok_or_else(|| err("head requires a flattened input".to_string()))?;
                if classes < 2 {
                    return Err(err("softmax head needs >= 2 classes".to_string()));
                }
                out.push(Some(WeightShape::Dense { out: classes, cin }));
            }
        }
    }
    Ok(out)
}

/// Reference architecture for square single-channel inputs: two 5x5 valid
/// conv blocks with 2x2 maxpools, then 120/84 dense layers and a head.
pub fn lenet_small(input: (usize, usize, usize), head: HeadKind) -> Vec<LayerSpec> {
    let mut specs = vec![
        LayerSpec::Conv {
            out_channels: 6,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv {
            out_channels: 16,
            kernel: 5,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 120 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: 84 },
        LayerSpec::Relu,
    ];
    let _ = input;
    specs.push(match head {
        HeadKind::Sigmoid => LayerSpec::SigmoidHead,
        HeadKind::Softmax(n) => LayerSpec::SoftmaxHead { classes: n },
    });
    specs
}

impl<F: NetFloat> Model<F> {
    /// Builds a model with Kaiming fan-in init (weights ~ N(0, 2/fan_in),
    /// biases zero), all randomness drawn from a ChaCha stream per `seed`.
    pub fn new(
        specs: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self, NetError> {
        let shapes = trace_shapes(&specs, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut velocity = Vec::with_capacity(specs.len());
        for shape in &shapes {
            match shape {
                Some(ws) => {
                    let std = (2.0 / ws.fan_in() as f64).sqrt();
                    let w: Vec<F> = (0..ws.w_len())
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            F::from_f64(z * std).unwrap()
                        })
                        .collect();
                    let b = vec![F::zero(); ws.b_len()];
                    params.push(Some(Params { w, b: b.clone() }));
                    velocity.push(Some(Params {
                        w: vec![F::zero(); ws.w_len()],
                        b,
                    }));
                }
                None => {
                    params.push(None);
                    velocity.push(None);
                }
            }
        }
        Ok(Self {
            specs,
            input_shape,
            params,
            velocity,
            epoch: 0,
            rng,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn head_kind(&self) -> HeadKind {
        match *self.specs.last().expect("validated at construction") {
            LayerSpec::SigmoidHead => HeadKind::Sigmoid,
            LayerSpec::SoftmaxHead { classes } => HeadKind::Softmax(classes),
            _ => unreachable!("head is last by construction"),
        }
    }

    fn weight_shapes(&self) -> Vec<Option<WeightShape>> {
        trace_shapes(&self.specs, self.input_shape).expect("validated at construction")
    }

    /// Mutable flat views over every parameter buffer, in layer order
    /// (weights then biases per layer). Used by gradient checks.
    pub fn param_buffers_mut(&mut self) -> Vec<&mut [F]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.w.as_mut_slice(), p.b.as_mut_slice()])
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.w.len() + p.b.len())
            .sum()
    }

    /// Forward pass to probabilities: (batch, 1) for sigmoid heads,
    /// (batch, classes) for softmax heads.
    pub fn forward(&self, x: &Tensor4<F>) -> Result<Array2<F>, NetError> {
        let (probs, _) = self.forward_cached(x, false)?;
        Ok(probs)
    }

    fn forward_cached(
        &self,
        x: &Tensor4<F>,
        keep_caches: bool,
    ) -> Result<(Array2<F>, Vec<LayerCache<F>>), NetError> {
        let (c, h, w) = self.input_shape;
        let dim = x.data.dim();
        if (dim.1, dim.2, dim.3) != (c, h, w) {
            return Err(NetError::Shape {
                layer: 0,
                msg: format!("input {dim:?} does not match model input {c}x{h}x{w}"),
            });
        }
        let shapes = self.weight_shapes();
        let mut act = Activation::A4(x.data.clone());
        let mut caches = Vec::new();
        for (i, spec) in self.specs.iter().enumerate() {
            let mut argmax = None;
            let input_snapshot = if keep_caches {
                Some(act.clone())
            } else {
                None
            };
            act = match (*spec, &act) {
                (
                    LayerSpec::Conv {
                        stride, padding, ..
                    },
                    Activation::A4(a),
                ) => {
                    let Some(WeightShape::Conv { out, cin, kernel }) = shapes[i].clone() else {
                        unreachable!()
                    };
                    let p = self.params[i].as_ref().expect("conv has params");
                    Activation::A4(conv_forward(a, &p.w, &p.b, out, cin, kernel, stride, padding))
                }
                (LayerSpec::MaxPool { size }, Activation::A4(a)) => {
                    let (out, idx) = maxpool_forward(a, size);
                    argmax = Some(idx);
                    Activation::A4(out)
                }
                (LayerSpec::AvgPool { size }, Activation::A4(a)) => {
                    Activation::A4(avgpool_forward(a, size))
                }
                (LayerSpec::Relu, Activation::A4(a)) => {
                    Activation::A4(a.mapv(|v| v.max(F::zero())))
                }
                (LayerSpec::Relu, Activation::A2(a)) => {
                    Activation::A2(a.mapv(|v| v.max(F::zero())))
                }
                (LayerSpec::Tanh, Activation::A4(a)) => Activation::A4(a.mapv(F::tanh)),
                (LayerSpec::Tanh, Activation::A2(a)) => Activation::A2(a.mapv(F::tanh)),
                (LayerSpec::Flatten, Activation::A4(a)) => {
                    let batch = a.dim().0;
                    let flat = a.len() / batch;
                    Activation::A2(
                        a.to_shape((batch, flat))
                            .expect("contiguous activation")
                            .to_owned(),
                    )
                }
                (
                    LayerSpec::Dense { .. }
                    | LayerSpec::SigmoidHead
                    | LayerSpec::SoftmaxHead { .. },
                    Activation::A2(a),
                ) => {
                    let Some(WeightShape::Dense { out, cin }) = shapes[i].clone() else {
                        unreachable!()
                    };
                    let p = self.params[i].as_ref().expect("dense has params");
                    let wm = Array2::from_shape_vec((out, cin), p.w.clone())
                        .expect("validated shape");
                    let bv = Array1::from_vec(p.b.clone());
                    let mut z = a.dot(&wm.t());
                    for mut row in z.rows_mut() {
                        row.zip_mut_with(&bv, |v, &b| *v = *v + b);
                    }
                    match *spec {
                        LayerSpec::Dense { .. } => Activation::A2(z),
                        LayerSpec::SigmoidHead => {
                            Activation::A2(z.mapv(|v| F::one() / (F::one() + (-v).exp())))
                        }
                        LayerSpec::SoftmaxHead { .. } => Activation::A2(softmax_rows(&z)),
                        _ => unreachable!(),
                    }
                }
                _ => {
                    return Err(NetError::Shape {
                        layer: i,
                        msg: "activation rank does not match layer kind".to_string(),
                    })
                }
            };
            if keep_caches {
                caches.push(LayerCache {
                    input: input_snapshot.expect("snapshot taken when caching"),
                    argmax,
                });
            }
        }
        match act {
            Activation::A2(probs) => Ok((probs, caches)),
            Activation::A4(_) => unreachable!("head output is 2-d"),
        }
    }

    /// Backpropagation through the whole stack; gradients of the batch-mean
    /// cross-entropy with respect to every parameter.
    pub fn backward(
        &self,
        x: &Tensor4<F>,
        labels: &[usize],
    ) -> Result<(F, Gradients<F>), NetError> {
        let batch = x.batch();
        if labels.len() != batch {
            return Err(NetError::Shape {
                layer: 0,
                msg: format!("{} labels for batch of {batch}", labels.len()),
            });
        }
        let (probs, caches) = self.forward_cached(x, true)?;
        let loss_value = loss(&probs, labels, self.head_kind())?;

        // Combined head+loss gradient: (p - y) / batch for both heads.
        let inv_b = F::from_usize(batch).unwrap().recip();
        let mut d_logits = probs;
        match self.head_kind() {
            HeadKind::Sigmoid => {
                for (row, &y) in d_logits.rows_mut().into_iter().zip(labels) {
                    debug_assert!(y <= 1);
                    let target = F::from_usize(y).unwrap();
                    for v in row {
                        *v = (*v - target) * inv_b;
                    }
                }
            }
            HeadKind::Softmax(classes) => {
                for (mut row, &y) in d_logits.rows_mut().into_iter().zip(labels) {
                    if y >= classes {
                        return Err(NetError::Shape {
                            layer: self.specs.len() - 1,
                            msg: format!("label {y} out of range for {classes} classes"),
                        });
                    }
                    row[y] = row[y] - F::one();
                    row.mapv_inplace(|v| v * inv_b);
                }
            }
        }

        let shapes = self.weight_shapes();
        let mut grads: Vec<Option<Params<F>>> = vec![None; self.specs.len()];
        let mut d_act = Activation::A2(d_logits);
        for i in (0..self.specs.len()).rev() {
            let cache = &caches[i];
            d_act = match (self.specs[i], &d_act, &cache.input) {
                (
                    LayerSpec::Conv {
                        stride, padding, ..
                    },
                    Activation::A4(d_out),
                    Activation::A4(input),
                ) => {
                    let Some(WeightShape::Conv { out, cin, kernel }) = shapes[i].clone() else {
                        unreachable!()
                    };
                    let p = self.params[i].as_ref().expect("conv has params");
                    let (dw, db, dx) =
                        conv_backward(input, d_out, &p.w, out, cin, kernel, stride, padding);
                    grads[i] = Some(Params { w: dw, b: db });
                    Activation::A4(dx)
                }
                (LayerSpec::MaxPool { size }, Activation::A4(d_out), Activation::A4(input)) => {
                    let idx = cache.argmax.as_ref().expect("maxpool cached argmax");
                    Activation::A4(maxpool_backward(input.dim(), d_out, idx, size))
                }
                (LayerSpec::AvgPool { size }, Activation::A4(d_out), Activation::A4(input)) => {
                    Activation::A4(avgpool_backward(input.dim(), d_out, size))
                }
                (LayerSpec::Relu, Activation::A4(d_out), Activation::A4(input)) => {
                    let mut dx = d_out.clone();
                    dx.zip_mut_with(input, |d, &v| {
                        if v <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    Activation::A4(dx)
                }
                (LayerSpec::Relu, Activation::A2(d_out), Activation::A2(input)) => {
                    let mut dx = d_out.clone();
                    dx.zip_mut_with(input, |d, &v| {
                        if v <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    Activation::A2(dx)
                }
                (LayerSpec::Tanh, Activation::A4(d_out), Activation::A4(input)) => {
                    let mut dx = d_out.clone();
                    dx.zip_mut_with(input, |d, &v| {
                        let t = v.tanh();
                        *d = *d * (F::one() - t * t);
                    });
                    Activation::A4(dx)
                }
                (LayerSpec::Tanh, Activation::A2(d_out), Activation::A2(input)) => {
                    let mut dx = d_out.clone();
                    dx.zip_mut_with(input, |d, &v| {
                        let t = v.tanh();
                        *d = *d * (F::one() - t * t);
                    });
                    Activation::A2(dx)
                }
                (LayerSpec::Flatten, Activation::A2(d_out), Activation::A4(input)) => {
                    Activation::A4(
                        d_out
                            .to_shape(input.dim())
                            .expect("flatten preserves length")
                            .to_owned(),
                    )
                }
                (
                    LayerSpec::Dense { .. }
                    | LayerSpec::SigmoidHead
                    | LayerSpec::SoftmaxHead { .. },
                    Activation::A2(d_out),
                    Activation::A2(input),
                ) => {
                    let Some(WeightShape::Dense { out, cin }) = shapes[i].clone() else {
                        unreachable!()
                    };
                    let p = self.params[i].as_ref().expect("dense has params");
                    let wm = Array2::from_shape_vec((out, cin), p.w.clone())
                        .expect("validated shape");
                    let dw = d_out.t().dot(input);
                    let db = d_out.sum_axis(Axis(0));
                    let dx = d_out.dot(&wm);
                    grads[i] = Some(Params {
                        w: dw.into_iter().collect(),
                        b: db.into_iter().collect(),
                    });
                    Activation::A2(dx)
                }
                _ => unreachable!("forward validated the stack"),
            };
        }
        Ok((loss_value, Gradients { layers: grads }))
    }

    /// Classical momentum with additive L2: g' = g + l2*w; v <- m*v - lr*g';
    /// w <- w + v.
    pub fn sgd_step(&mut self, grads: &Gradients<F>, cfg: &OptimConfig) {
        let lr = F::from_f64(cfg.learning_rate).unwrap();
        let m = F::from_f64(cfg.momentum).unwrap();
        let l2 = F::from_f64(cfg.l2).unwrap();
        for ((p, v), g) in self
            .params
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grads.layers)
        {
            let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) else {
                continue;
            };
            for ((w, vel), &gr) in p.w.iter_mut().zip(&mut v.w).zip(&g.w) {
                *vel = m * *vel - lr * (gr + l2 * *w);
                *w = *w + *vel;
            }
            for ((b, vel), &gr) in p.b.iter_mut().zip(&mut v.b).zip(&g.b) {
                // Biases are conventionally exempt from weight decay.
                *vel = m * *vel - lr * gr;
                *b = *b + *vel;
            }
        }
    }
}

impl Model<f32> {
    /// f64 clone for shadow-mode gradient verification.
    pub fn to_f64(&self) -> Model<f64> {
        let cast = |p: &Option<Params<f32>>| {
            p.as_ref().map(|p| Params {
                w: p.w.iter().map(|&v| v as f64).collect(),
                b: p.b.iter().map(|&v| v as f64).collect(),
            })
        };
        Model {
            specs: self.specs.clone(),
            input_shape: self.input_shape,
            params: self.params.iter().map(cast).collect(),
            velocity: self.velocity.iter().map(cast).collect(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        }
    }
}

impl<F: NetFloat> Gradients<F> {
    /// All gradient entries flattened in parameter order (w then b per layer).
    pub fn flat(&self) -> Vec<F> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.w.iter().chain(&p.b).copied())
            .collect()
    }
}

fn softmax_rows<F: NetFloat>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Batch-mean cross-entropy, probabilities clamped to [1e-7, 1 - 1e-7].
pub fn loss<F: NetFloat>(
    probs: &Array2<F>,
    labels: &[usize],
    head: HeadKind,
) -> Result<F, NetError> {
    let batch = probs.dim().0;
    if labels.len() != batch || batch == 0 {
        return Err(NetError::Shape {
            layer: 0,
            msg: format!("{} labels for {batch} probability rows", labels.len()),
        });
    }
    let lo = F::from_f64(1e-7).unwrap();
    let hi = F::one() - lo;
    let clamp = |p: F| p.max(lo).min(hi);
    let mut total = F::zero();
    match head {
        HeadKind::Sigmoid => {
            for (row, &y) in probs.rows().into_iter().zip(labels) {
                let p = clamp(row[0]);
                total = total
                    - if y == 1 {
                        p.ln()
                    } else {
                        (F::one() - p).ln()
                    };
            }
        }
        HeadKind::Softmax(classes) => {
            for (row, &y) in probs.rows().into_iter().zip(labels) {
                if y >= classes {
                    return Err(NetError::Shape {
                        layer: 0,
                        msg: format!("label {y} out of range for {classes} classes"),
                    });
                }
                total = total - clamp(row[y]).ln();
            }
        }
    }
    Ok(total / F::from_usize(batch).unwrap())
}

fn im2col<F: NetFloat>(
    x: &ArrayView3<F>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut cols = Array2::zeros((c * kernel * kernel, oh * ow));
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                for i in 0..oh {
                    let y = i * stride + ki;
                    if y < padding || y >= h + padding {
                        continue;
                    }
                    for j in 0..ow {
                        let xc = j * stride + kj;
                        if xc < padding || xc >= w + padding {
                            continue;
                        }
                        cols[[row, i * ow + j]] = x[[ci, y - padding, xc - padding]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<F: NetFloat>(
    dcols: &Array2<F>,
    dx: &mut ndarray::ArrayViewMut3<F>,
    kernel: usize,
    stride: usize,
    padding: usize,
) {
    let (c, h, w) = dx.dim();
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                for i in 0..oh {
                    let y = i * stride + ki;
                    if y < padding || y >= h + padding {
                        continue;
                    }
                    for j in 0..ow {
                        let xc = j * stride + kj;
                        if xc < padding || xc >= w + padding {
                            continue;
                        }
                        dx[[ci, y - padding, xc - padding]] =
                            dx[[ci, y - padding, xc - padding]] + dcols[[row, i * ow + j]];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<F: NetFloat>(
    x: &Array4<F>,
    w: &[F],
    b: &[F],
    out_channels: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array4<F> {
    let (batch, _, h, width) = x.dim();
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (width + 2 * padding - kernel) / stride + 1;
    let w2 = Array2::from_shape_vec((out_channels, cin * kernel * kernel), w.to_vec())
        .expect("validated shape");
    let mut out = Array4::zeros((batch, out_channels, oh, ow));
    for s in 0..batch {
        let cols = im2col(&x.index_axis(Axis(0), s), kernel, stride, padding);
        let y = w2.dot(&cols);
        let mut slot = out.index_axis_mut(Axis(0), s);
        for co in 0..out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    slot[[co, i, j]] = y[[co, i * ow + j]] + b[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<F: NetFloat>(
    x: &Array4<F>,
    d_out: &Array4<F>,
    w: &[F],
    out_channels: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<F>, Vec<F>, Array4<F>) {
    let (batch, _, _, _) = x.dim();
    let (_, _, oh, ow) = d_out.dim();
    let patch = cin * kernel * kernel;
    let w2 =
        Array2::from_shape_vec((out_channels, patch), w.to_vec()).expect("validated shape");
    let mut dw = Array2::<F>::zeros((out_channels, patch));
    let mut db = vec![F::zero(); out_channels];
    let mut dx = Array4::zeros(x.dim());
    for s in 0..batch {
        let cols = im2col(&x.index_axis(Axis(0), s), kernel, stride, padding);
        let d = d_out.index_axis(Axis(0), s);
        let d2 = d
            .to_shape((out_channels, oh * ow))
            .expect("contiguous gradient");
        dw = dw + d2.dot(&cols.t());
        for co in 0..out_channels {
            db[co] = db[co] + d2.row(co).sum();
        }
        let dcols = w2.t().dot(&d2);
        col2im_add(
            &dcols,
            &mut dx.index_axis_mut(Axis(0), s),
            kernel,
            stride,
            padding,
        );
    }
    (dw.into_iter().collect(), db, dx)
}

fn maxpool_forward<F: NetFloat>(x: &Array4<F>, size: usize) -> (Array4<F>, Array4<usize>) {
    let (batch, c, h, w) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let mut out = Array4::zeros((batch, c, oh, ow));
    let mut argmax = Array4::zeros((batch, c, oh, ow));
    for s in 0..batch {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0;
                    for di in 0..size {
                        for dj in 0..size {
                            let (y, xc) = (i * size + di, j * size + dj);
                            let v = x[[s, ci, y, xc]];
                            if v > best {
                                best = v;
                                best_idx = y * w + xc;
                            }
                        }
                    }
                    out[[s, ci, i, j]] = best;
                    argmax[[s, ci, i, j]] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

fn maxpool_backward<F: NetFloat>(
    input_dim: (usize, usize, usize, usize),
    d_out: &Array4<F>,
    argmax: &Array4<usize>,
    _size: usize,
) -> Array4<F> {
    let (_, _, _, w) = input_dim;
    let mut dx = Array4::zeros(input_dim);
    for ((idx, &d), &flat) in d_out.indexed_iter().zip(argmax.iter()) {
        let (s, c, _, _) = idx;
        dx[[s, c, flat / w, flat % w]] = dx[[s, c, flat / w, flat % w]] + d;
    }
    dx
}

fn avgpool_forward<F: NetFloat>(x: &Array4<F>, size: usize) -> Array4<F> {
    let (batch, c, h, w) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let norm = F::from_usize(size * size).unwrap().recip();
    let mut out = Array4::zeros((batch, c, oh, ow));
    for s in 0..batch {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = F::zero();
                    for di in 0..size {
                        for dj in 0..size {
                            acc = acc + x[[s, ci, i * size + di, j * size + dj]];
                        }
                    }
                    out[[s, ci, i, j]] = acc * norm;
                }
            }
        }
    }
    out
}

fn avgpool_backward<F: NetFloat>(
    input_dim: (usize, usize, usize, usize),
    d_out: &Array4<F>,
    size: usize,
) -> Array4<F> {
    let norm = F::from_usize(size * size).unwrap().recip();
    let mut dx = Array4::zeros(input_dim);
    for ((idx, &d), _) in d_out.indexed_iter().zip(0..) {
        let (s, c, i, j) = idx;
        let spread = d * norm;
        for di in 0..size {
            for dj in 0..size {
                dx[[s, c, i * size + di, j * size + dj]] =
                    dx[[s, c, i * size + di, j * size + dj]] + spread;
            }
        }
    }
    dx
}

/// Worst relative disagreement between analytic and central-finite-difference
/// gradients over every parameter, evaluated in f64 shadow mode with the
/// given base step. Where the base step straddles a ReLU/maxpool kink the
/// finite difference is invalid; such entries are re-estimated with the step
/// shrunk 10x and 100x and the best agreement kept — a real backprop defect
/// produces a stable estimate that keeps disagreeing.
pub fn fd_gradient_check(
    model: &Model<f32>,
    x: &Tensor4<f64>,
    labels: &[usize],
    base_eps: f64,
) -> Result<f64, NetError> {
    let mut shadow = model.to_f64();
    let (_, grads) = shadow.backward(x, labels)?;
    let analytic = grads.flat();
    let mut worst: f64 = 0.0;
    let mut flat_idx = 0;
    let n_buffers = shadow.param_buffers_mut().len();
    for b in 0..n_buffers {
        let len = shadow.param_buffers_mut()[b].len();
        for i in 0..len {
            let a = analytic[flat_idx];
            flat_idx += 1;
            let mut best = f64::INFINITY;
            for shrink in [1.0, 10.0, 100.0] {
                let eps = base_eps / shrink;
                let orig = shadow.param_buffers_mut()[b][i];
                shadow.param_buffers_mut()[b][i] = orig + eps;
                let lp = shadow.backward(x, labels)?.0;
                shadow.param_buffers_mut()[b][i] = orig - eps;
                let lm = shadow.backward(x, labels)?.0;
                shadow.param_buffers_mut()[b][i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
                best = best.min(rel);
                if best < 1e-4 {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    debug_assert_eq!(flat_idx, analytic.len());
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_metric: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot at the epoch with the best test metric (earliest on ties).
    pub best: Model<f32>,
    pub best_epoch: usize,
}

fn gather_batch(x: &Tensor4<f32>, labels: &[usize], idx: &[usize]) -> (Tensor4<f32>, Vec<usize>) {
    let (_, c, h, w) = x.data.dim();
    let mut data = Array4::zeros((idx.len(), c, h, w));
    let mut y = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        data.index_axis_mut(Axis(0), row)
            .assign(&x.data.index_axis(Axis(0), i));
        y.push(labels[i]);
    }
    (Tensor4 { data }, y)
}

/// Mean test loss plus metric: AUC for sigmoid heads, top-1 accuracy for
/// softmax heads. Evaluation batches are fixed at 256 samples.
pub fn evaluate(
    model: &Model<f32>,
    x: &Tensor4<f32>,
    labels: &[usize],
) -> Result<(f64, f64), NetError> {
    let n = x.batch();
    let head = model.head_kind();
    let mut scores = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    let mut total_loss = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (bx, by) = gather_batch(x, labels, &idx);
        let probs = model.forward(&bx)?;
        total_loss += loss(&probs, &by, head)? as f64 * (end - start) as f64;
        for row in probs.rows() {
            match head {
                HeadKind::Sigmoid => scores.push(row[0] as f64),
                HeadKind::Softmax(_) => {
                    let pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(i, _)| i)
                        .unwrap();
                    preds.push(pred);
                }
            }
        }
        start = end;
    }
    let mean_loss = total_loss / n as f64;
    let metric = match head {
        HeadKind::Sigmoid => {
            let bin: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            crate::eval::roc_curve(&scores, &bin)
                .map_err(|e| NetError::Metric(e.to_string()))?
                .auc
        }
        HeadKind::Softmax(_) => {
            preds
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count() as f64
                / n as f64
        }
    };
    Ok((mean_loss, metric))
}

/// One seeded-shuffled pass per epoch in batches of cfg.batch_size (final
/// partial batch kept); after each epoch evaluates test loss and metric and
/// tracks the best-metric snapshot.
pub fn train(
    model: &mut Model<f32>,
    x_train: &Tensor4<f32>,
    y_train: &[usize],
    x_test: &Tensor4<f32>,
    y_test: &[usize],
    cfg: &OptimConfig,
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    let n = x_train.batch();
    if n == 0 || x_test.batch() == 0 || y_train.len() != n || y_test.len() != x_test.batch() {
        return Err(NetError::Shape {
            layer: 0,
            msg: "empty split or label/sample count mismatch".to_string(),
        });
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for _ in 0..cfg.epochs {
        let epoch = model.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates off the model RNG so resume replays identically.
        for i in (1..n).rev() {
            let j = model.rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut train_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = gather_batch(x_train, y_train, chunk);
            let (batch_loss, grads) = model.backward(&bx, &by)?;
            if !batch_loss.is_finite() {
                return Err(NetError::NonFinite {
                    epoch,
                    batch: batch_no,
                });
            }
            model.sgd_step(&grads, cfg);
            train_loss += batch_loss as f64 * chunk.len() as f64;
        }
        model.epoch += 1;
        let (test_loss, test_metric) = evaluate(model, x_test, y_test)?;
        history.push(EpochRecord {
            epoch,
            train_loss: train_loss / n as f64,
            test_loss,
            test_metric,
        });
        let improved = best
            .as_ref()
            .map(|(m, _, _)| test_metric > *m)
            .unwrap_or(true);
        if improved {
            best = Some((test_metric, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
    })
}

const CKPT_MAGIC: &[u8; 4] = b"XEVC";
const CKPT_VERSION: u16 = 1;

fn spec_code(spec: &LayerSpec) -> (u8, [u32; 4]) {
    match *spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => (
            0,
            [
                out_channels as u32,
                kernel as u32,
                stride as u32,
                padding as u32,
            ],
        ),
        LayerSpec::MaxPool { size } => (1, [size as u32, 0, 0, 0]),
        LayerSpec::AvgPool { size } => (2, [size as u32, 0, 0, 0]),
        LayerSpec::Relu => (3, [0; 4]),
        LayerSpec::Tanh => (4, [0; 4]),
        LayerSpec::Flatten => (5, [0; 4]),
        LayerSpec::Dense { units } => (6, [units as u32, 0, 0, 0]),
        LayerSpec::SigmoidHead => (7, [0; 4]),
        LayerSpec::SoftmaxHead { classes } => (8, [classes as u32, 0, 0, 0]),
    }
}

fn spec_decode(tag: u8, args: [u32; 4]) -> Result<LayerSpec, NetError> {
    Ok(match tag {
        0 => LayerSpec::Conv {
            out_channels: args[0] as usize,
            kernel: args[1] as usize,
            stride: args[2] as usize,
            padding: args[3] as usize,
        },
        1 => LayerSpec::MaxPool {
            size: args[0] as usize,
        },
        2 => LayerSpec::AvgPool {
            size: args[0] as usize,
        },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Tanh,
        5 => LayerSpec::Flatten,
        6 => LayerSpec::Dense {
            units: args[0] as usize,
        },
        7 => LayerSpec::SigmoidHead,
        8 => LayerSpec::SoftmaxHead {
            classes: args[0] as usize,
        },
        other => return Err(NetError::Format(format!("unknown layer tag {other}"))),
    })
}

/// Version-tagged binary checkpoint: architecture, parameters, velocity,
/// epoch counter, and the full RNG state, round-tripping bitwise.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), NetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u16::<LittleEndian>(CKPT_VERSION)?;
    let (c, h, wd) = model.input_shape;
    w.write_u32::<LittleEndian>(c as u32)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    w.write_u64::<LittleEndian>(model.epoch as u64)?;
    w.write_all(&model.rng.get_seed())?;
    let pos = model.rng.get_word_pos();
    w.write_u64::<LittleEndian>(pos as u64)?;
    w.write_u64::<LittleEndian>((pos >> 64) as u64)?;
    w.write_u64::<LittleEndian>(model.rng.get_stream())?;
    w.write_u16::<LittleEndian>(model.specs.len() as u16)?;
    for spec in &model.specs {
        let (tag, args) = spec_code(spec);
        w.write_u8(tag)?;
        for a in args {
            w.write_u32::<LittleEndian>(a)?;
        }
    }
    for bank in [&model.params, &model.velocity] {
        for p in bank.iter().flatten() {
            for &v in p.w.iter().chain(&p.b) {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, NetError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| NetError::Format("file shorter than header".to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let c = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let wd = r.read_u32::<LittleEndian>()? as usize;
    let epoch = r.read_u64::<LittleEndian>()? as usize;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let pos_lo = r.read_u64::<LittleEndian>()? as u128;
    let pos_hi = r.read_u64::<LittleEndian>()? as u128;
    let stream = r.read_u64::<LittleEndian>()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos_lo | (pos_hi << 64));
    let n_specs = r.read_u16::<LittleEndian>()? as usize;
    let mut specs = Vec::with_capacity(n_specs);
    for _ in 0..n_specs {
        let tag = r.read_u8()?;
        let mut args = [0u32; 4];
        for a in &mut args {
            *a = r.read_u32::<LittleEndian>()?;
        }
        specs.push(spec_decode(tag, args)?);
    }
    let shapes = trace_shapes(&specs, (c, h, wd))
        .map_err(|e| NetError::Format(format!("inconsistent architecture: {e}")))?;
    let read_bank = |r: &mut dyn Read| -> Result<Vec<Option<Params<f32>>>, NetError> {
        shapes
            .iter()
            .map(|s| {
                s.as_ref()
                    .map(|ws| {
                        let read_vec = |r: &mut dyn Read, len: usize| {
                            (0..len)
                                .map(|_| r.read_f32::<LittleEndian>())
                                .collect::<Result<Vec<f32>, _>>()
                                .map_err(|_| {
                                    NetError::Format("truncated parameter blob".to_string())
                                })
                        };
                        Ok(Params {
                            w: read_vec(r, ws.w_len())?,
                            b: read_vec(r, ws.b_len())?,
                        })
                    })
                    .transpose()
            })
            .collect()
    };
    let params = read_bank(&mut r)?;
    let velocity = read_bank(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(NetError::Format("trailing bytes after checkpoint".to_string()));
    }
    Ok(Model {
        specs,
        input_shape: (c, h, wd),
        params,
        velocity,
        epoch,
        rng,
    })
}
