//! A minimal deterministic CNN: layer specs, batched forward pass, reverse-mode
//! gradients with the explainable channel loss injected at a target layer, and
//! a plain SGD trainer.

mod checkpoint;
pub(crate) mod layers;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::ecloss::{ecloss_and_gradient, mutual_information, LossConfig};
use crate::error::{domain, Result};
use crate::rng;
use crate::templates::TemplateSet;
use crate::tensor::{FeatureBatch, Tensor};
use layers::{ConvGeom, Dims};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{train, LabeledImages, LogRow, TrainerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv { kernel, in_channels, out_channels, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv { kernel, in_channels, out_channels, stride, pad } => {
                write!(f, "conv:{kernel}:{in_channels}:{out_channels}:{stride}:{pad}")
            }
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool { kernel, stride } => write!(f, "maxpool:{kernel}:{stride}"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { inputs, outputs } => write!(f, "dense:{inputs}:{outputs}"),
        }
    }
}

impl FromStr for Layer {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let nums: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| domain(format!("bad layer field in {s:?}"))))
            .collect::<Result<_>>()?;
        let layer = match (name, nums.as_slice()) {
            ("conv", &[kernel, in_channels, out_channels, stride, pad]) => Layer::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
                pad,
            },
            ("relu", []) => Layer::Relu,
            ("maxpool", &[kernel, stride]) => Layer::MaxPool { kernel, stride },
            ("flatten", []) => Layer::Flatten,
            ("dense", &[inputs, outputs]) => Layer::Dense { inputs, outputs },
            _ => return Err(domain(format!("unknown layer {s:?}"))),
        };
        Ok(layer)
    }
}

/// Layer sequence plus the index of the convolution whose post-ReLU output
/// feeds the explainable channel loss. The layer after the target must be a
/// ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub target_layer: usize,
}

/// Resolved layer geometry.
#[derive(Debug, Clone)]
struct Plan {
    dims: Vec<Dims>,
    offsets: Vec<usize>,
    n_params: usize,
}

impl NetworkSpec {
    /// conv(3,1,8)-relu-pool-conv(3,8,16)-relu-pool-conv(3,16,C)-relu-flatten-dense
    /// on a `size x size` grayscale input; the target map is `size/4` square.
    pub fn reference(size: usize, channels: usize, classes: usize) -> Self {
        let s = size / 4;
        let conv = |cin, cout| Layer::Conv {
            kernel: 3,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            pad: 1,
        };
        Self {
            input: (1, size, size),
            layers: vec![
                conv(1, 8),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                conv(8, 16),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                conv(16, channels),
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    inputs: channels * s * s,
                    outputs: classes,
                },
            ],
            target_layer: 6,
        }
    }

    fn plan(&self) -> Result<Plan> {
        let (c, h, w) = self.input;
        let mut cur = Dims { c, h, w };
        let mut flat = false;
        let mut dims = vec![cur];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut n_params = 0;
        for (idx, layer) in self.layers.iter().enumerate() {
            offsets.push(n_params);
            n_params += layer.param_count();
            cur = match *layer {
                Layer::Conv { kernel, in_channels, out_channels, stride, pad } => {
                    if flat || in_channels != cur.c {
                        return Err(domain(format!(
                            "layer {idx} ({layer}) expects {in_channels} input channels, got {}",
                            cur.c
                        )));
                    }
                    if kernel == 0 || stride == 0 || cur.h + 2 * pad < kernel || cur.w + 2 * pad < kernel {
                        return Err(domain(format!("layer {idx} ({layer}) does not fit {}x{}", cur.h, cur.w)));
                    }
                    Dims {
                        c: out_channels,
                        h: (cur.h + 2 * pad - kernel) / stride + 1,
                        w: (cur.w + 2 * pad - kernel) / stride + 1,
                    }
                }
                Layer::Relu => cur,
                Layer::MaxPool { kernel, stride } => {
                    if flat || kernel == 0 || stride == 0 || cur.h < kernel || cur.w < kernel {
                        return Err(domain(format!("layer {idx} ({layer}) does not fit")));
                    }
                    Dims {
                        c: cur.c,
                        h: (cur.h - kernel) / stride + 1,
                        w: (cur.w - kernel) / stride + 1,
                    }
                }
                Layer::Flatten => {
                    flat = true;
                    Dims { c: cur.len(), h: 1, w: 1 }
                }
                Layer::Dense { inputs, outputs } => {
                    if !flat || inputs != cur.len() {
                        return Err(domain(format!(
                            "layer {idx} ({layer}) expects {inputs} flattened inputs, got {}",
                            cur.len()
                        )));
                    }
                    Dims { c: outputs, h: 1, w: 1 }
                }
            };
            dims.push(cur);
        }
        if !flat || !matches!(self.layers.last(), Some(Layer::Dense { .. })) {
            return Err(domain("network must end with flatten ... dense"));
        }
        if !matches!(self.layers.get(self.target_layer), Some(Layer::Conv { .. }))
            || self.layers.get(self.target_layer + 1) != Some(&Layer::Relu)
        {
            return Err(domain(format!(
                "target layer {} must be a convolution followed by relu",
                self.target_layer
            )));
        }
        Ok(Plan { dims, offsets, n_params })
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.plan()?.n_params)
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.plan()?.dims.last().unwrap().c)
    }

    /// `(channels, height, width)` of the target feature maps.
    pub fn target_shape(&self) -> Result<(usize, usize, usize)> {
        let d = self.plan()?.dims[self.target_layer + 2];
        Ok((d.c, d.h, d.w))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        let layers: Vec<String> = self.layers.iter().map(Layer::to_string).collect();
        write!(
            f,
            "input={c}x{h}x{w} target={} layers={}",
            self.target_layer,
            layers.join(",")
        )
    }
}

impl FromStr for NetworkSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut input = None;
        let mut target = None;
        let mut layers = None;
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| domain(format!("bad network field {field:?}")))?;
            match key {
                "input" => {
                    let d: Vec<usize> = value
                        .split('x')
                        .map(|v| v.parse().map_err(|_| domain(format!("bad input dims {value:?}"))))
                        .collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(domain(format!("bad input dims {value:?}")));
                    }
                    input = Some((d[0], d[1], d[2]));
                }
                "target" => {
                    target = Some(value.parse().map_err(|_| domain(format!("bad target {value:?}")))?)
                }
                "layers" => layers = Some(value.split(',').map(str::parse).collect::<Result<Vec<Layer>>>()?),
                _ => return Err(domain(format!("unknown network field {key:?}"))),
            }
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| domain("network description lacks input="))?,
            layers: layers.ok_or_else(|| domain("network description lacks layers="))?,
            target_layer: target.ok_or_else(|| domain("network description lacks target="))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Seeded uniform init in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; biases zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Vec<f64>> {
    let plan = spec.plan()?;
    let mut rng = rng::stream(seed, "init");
    let mut params = Vec::with_capacity(plan.n_params);
    for layer in &spec.layers {
        let (n_weights, n_bias, fan_in, fan_out) = match *layer {
            Layer::Conv { kernel, in_channels, out_channels, .. } => {
                let kk = kernel * kernel;
                (out_channels * in_channels * kk, out_channels, in_channels * kk, out_channels * kk)
            }
            Layer::Dense { inputs, outputs } => (inputs * outputs, outputs, inputs, outputs),
            _ => continue,
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.extend((0..n_weights).map(|_| rng.random_range(-a..=a)));
        params.extend(std::iter::repeat_n(0.0, n_bias));
    }
    Ok(params)
}

/// Everything a backward pass over one sample needs.
struct Trace {
    /// `outputs[l]` is the input of layer `l`; the last entry is the logits.
    outputs: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

fn conv_geom(layer: &Layer, input: Dims, output: Dims) -> ConvGeom {
    let Layer::Conv { kernel, stride, pad, .. } = *layer else { unreachable!() };
    ConvGeom { k: kernel, stride, pad, input, output }
}

fn forward_sample(spec: &NetworkSpec, plan: &Plan, params: &[f64], image: &[f64]) -> Trace {
    let mut outputs = Vec::with_capacity(spec.layers.len() + 1);
    let mut argmax = vec![Vec::new(); spec.layers.len()];
    outputs.push(image.to_vec());
    for (l, layer) in spec.layers.iter().enumerate() {
        let input = outputs.last().unwrap();
        let (din, dout) = (plan.dims[l], plan.dims[l + 1]);
        let p = &params[plan.offsets[l]..plan.offsets[l] + layer.param_count()];
        let mut out = vec![0.0; dout.len()];
        match *layer {
            Layer::Conv { .. } => layers::conv_forward(&conv_geom(layer, din, dout), p, input, &mut out),
            Layer::Relu => layers::relu_forward(input, &mut out),
            Layer::MaxPool { kernel, stride } => {
                let mut am = vec![0; dout.len()];
                layers::maxpool_forward(kernel, stride, din, dout, input, &mut out, &mut am);
                argmax[l] = am;
            }
            Layer::Flatten => out.copy_from_slice(input),
            Layer::Dense { inputs, outputs: n } => layers::dense_forward(inputs, n, p, input, &mut out),
        }
        outputs.push(out);
    }
    Trace { outputs, argmax }
}

/// Backpropagates `grad_logits` (and `inject`, added to the gradient at the
/// target layer's post-ReLU output) into a fresh parameter-gradient vector.
fn backward_sample(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &[f64],
    trace: &Trace,
    grad_logits: Vec<f64>,
    inject: Option<&[f64]>,
) -> Vec<f64> {
    let mut grad_params = vec![0.0; plan.n_params];
    let mut grad = grad_logits;
    let inject_at = spec.target_layer + 2;
    for l in (0..spec.layers.len()).rev() {
        if l + 1 == inject_at {
            if let Some(extra) = inject {
                for (g, e) in grad.iter_mut().zip(extra) {
                    *g += e;
                }
            }
        }
        let layer = &spec.layers[l];
        let (din, dout) = (plan.dims[l], plan.dims[l + 1]);
        let range = plan.offsets[l]..plan.offsets[l] + layer.param_count();
        let input = &trace.outputs[l];
        let need_input_grad = l > 0;
        let mut grad_in = vec![0.0; din.len()];
        match *layer {
            Layer::Conv { .. } => layers::conv_backward(
                &conv_geom(layer, din, dout),
                &params[range.clone()],
                input,
                &grad,
                &mut grad_params[range],
                need_input_grad.then_some(grad_in.as_mut_slice()),
            ),
            Layer::Relu => layers::relu_backward(&trace.outputs[l + 1], &grad, &mut grad_in),
            Layer::MaxPool { .. } => layers::maxpool_backward(&trace.argmax[l], &grad, &mut grad_in),
            Layer::Flatten => grad_in.copy_from_slice(&grad),
            Layer::Dense { inputs, outputs } => layers::dense_backward(
                inputs,
                outputs,
                &params[range.clone()],
                input,
                &grad,
                &mut grad_params[range],
                need_input_grad.then_some(grad_in.as_mut_slice()),
            ),
        }
        grad = grad_in;
    }
    grad_params
}

fn check_inputs(spec: &NetworkSpec, plan: &Plan, params: &[f64], images: &Tensor) -> Result<usize> {
    if params.len() != plan.n_params {
        return Err(domain(format!(
            "network needs {} parameters, got {}",
            plan.n_params,
            params.len()
        )));
    }
    let (c, h, w) = spec.input;
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != [c, h, w] || shape[0] == 0 {
        return Err(domain(format!(
            "images must be b x {c} x {h} x {w} with b >= 1, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

fn run_forward(spec: &NetworkSpec, plan: &Plan, params: &[f64], images: &Tensor) -> Result<Vec<Trace>> {
    let b = check_inputs(spec, plan, params, images)?;
    Ok((0..b)
        .into_par_iter()
        .map(|i| forward_sample(spec, plan, params, images.outer(i)))
        .collect())
}

fn collect_outputs(spec: &NetworkSpec, plan: &Plan, traces: &[Trace]) -> Result<(Tensor, FeatureBatch)> {
    let b = traces.len();
    let classes = plan.dims.last().unwrap().c;
    let target = plan.dims[spec.target_layer + 2];
    let logits: Vec<f64> = traces.iter().flat_map(|t| t.outputs.last().unwrap().iter().copied()).collect();
    let feats: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.outputs[spec.target_layer + 2].iter().copied())
        .collect();
    Ok((
        Tensor::new(vec![b, classes], logits)?,
        FeatureBatch::from_raw(Tensor::new(vec![b, target.c, target.h, target.w], feats)?),
    ))
}

/// Class logits and the post-ReLU target-layer feature maps.
pub fn forward(spec: &NetworkSpec, params: &[f64], images: &Tensor) -> Result<(Tensor, FeatureBatch)> {
    let plan = spec.plan()?;
    let traces = run_forward(spec, &plan, params, images)?;
    collect_outputs(spec, &plan, &traces)
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / b`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(domain(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut grad = vec![0.0; b * n];
    let mut losses = Vec::with_capacity(b);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(domain(format!("label {y} out of range for {n} classes")));
        }
        let row = logits.outer(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        losses.push(lse - row[y]);
        for (k, g) in grad[i * n..(i + 1) * n].iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g = (p - f64::from(u8::from(k == y))) / b as f64;
        }
    }
    let loss = crate::ecloss::pairwise_sum(&losses) / b as f64;
    Ok((loss, Tensor::new(vec![b, n], grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput {
    pub total_loss: f64,
    pub cls_loss: f64,
    pub mi: f64,
    pub grad: Vec<f64>,
}

/// Full gradient of `alpha * CE - beta * MI` with respect to all parameters.
///
/// With `beta == 0` the loss path is skipped entirely, so the result is
/// bit-identical to a pure classification backward pass.
pub fn backward(
    spec: &NetworkSpec,
    params: &[f64],
    images: &Tensor,
    labels: &[usize],
    set: &TemplateSet,
    config: &LossConfig,
) -> Result<BackwardOutput> {
    config.validate()?;
    let plan = spec.plan()?;
    let traces = run_forward(spec, &plan, params, images)?;
    let (logits, features) = collect_outputs(spec, &plan, &traces)?;
    let (cls_loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;

    let (mi, inject) = if config.beta > 0.0 {
        let (ecl, g) = ecloss_and_gradient(&features, set)?;
        let scaled: Vec<f64> = g.into_data().into_iter().map(|v| config.beta * v).collect();
        (-ecl, Some(scaled))
    } else {
        (mutual_information(&features, set)?.mi, None)
    };
    let total_loss = crate::ecloss::total_loss(cls_loss, mi, config);

    let per_sample = features.channels() * features.height() * features.width();
    let grads: Vec<Vec<f64>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let gl: Vec<f64> = grad_logits.outer(i).iter().map(|g| config.alpha * g).collect();
            let inj = inject.as_ref().map(|v| &v[i * per_sample..(i + 1) * per_sample]);
            backward_sample(spec, &plan, params, trace, gl, inj)
        })
        .collect();

    let mut grad = vec![0.0; plan.n_params];
    for g in &grads {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok(BackwardOutput { total_loss, cls_loss, mi, grad })
}
