//! A small differentiable backbone: dense, ReLU, 3×3 convolution, 2×2 max
//! pooling and flatten layers with hand-written forward and backward passes,
//! SGD with momentum, a finite-difference gradient checker and a binary
//! checkpoint format.
//!
//! Activations are `B × features` matrices; image-shaped activations are laid
//! out channel-major (`c, h, w`) within each row.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::seed;

/// Channel-major activation shape. Flat vectors are `(d, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn flat(d: usize) -> Self {
        Self { c: d, h: 1, w: 1 }
    }

    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    Conv3x3 { in_ch: usize, out_ch: usize, stride: usize },
    MaxPool2x2,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { input, output } => write!(f, "dense({input},{output})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Conv3x3 { in_ch, out_ch, stride } => {
                write!(f, "conv3x3({in_ch},{out_ch},{stride})")
            }
            LayerSpec::MaxPool2x2 => write!(f, "maxpool2x2"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], &s[open + 1..s.len() - 1]),
            Some(_) => return Err(Error::Argument(format!("malformed layer `{s}`"))),
            None => (s, ""),
        };
        let nums = args
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Argument(format!("bad layer argument `{t}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = match (name, nums.as_slice()) {
            ("dense", [i, o]) => LayerSpec::Dense { input: *i, output: *o },
            ("relu", []) => LayerSpec::Relu,
            ("conv3x3", [i, o]) => LayerSpec::Conv3x3 { in_ch: *i, out_ch: *o, stride: 1 },
            ("conv3x3", [i, o, st]) => LayerSpec::Conv3x3 { in_ch: *i, out_ch: *o, stride: *st },
            ("maxpool2x2", []) => LayerSpec::MaxPool2x2,
            ("flatten", []) => LayerSpec::Flatten,
            _ => return Err(Error::Argument(format!("unknown layer `{s}`"))),
        };
        Ok(spec)
    }
}

/// Parses a whitespace-separated layer list such as
/// `dense(784,256) relu dense(256,64)`.
pub fn parse_layer_specs(text: &str) -> Result<Vec<LayerSpec>> {
    text.split_whitespace().map(str::parse).collect()
}

pub fn format_layer_specs(specs: &[LayerSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Weight matrix and bias vector of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPair {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ParamPair {
    fn zeros_like(other: &ParamPair) -> Self {
        Self {
            w: Array2::zeros(other.w.raw_dim()),
            b: Array1::zeros(other.b.raw_dim()),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, i: usize) -> f64 {
        let nw = self.w.len();
        if i < nw {
            self.w.as_slice().unwrap()[i]
        } else {
            self.b[i - nw]
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        let nw = self.w.len();
        if i < nw {
            self.w.as_slice_mut().unwrap()[i] = v;
        } else {
            self.b[i - nw] = v;
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    /// `w` is `input × output`.
    Dense(ParamPair),
    Relu,
    /// `w` is `out_ch × (in_ch · 9)`.
    Conv {
        params: ParamPair,
        stride: usize,
        input: Shape,
        output: Shape,
    },
    MaxPool {
        input: Shape,
        output: Shape,
    },
    Flatten,
}

impl Layer {
    fn params(&self) -> Option<&ParamPair> {
        match self {
            Layer::Dense(p) | Layer::Conv { params: p, .. } => Some(p),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<&mut ParamPair> {
        match self {
            Layer::Dense(p) | Layer::Conv { params: p, .. } => Some(p),
            _ => None,
        }
    }
}

enum LayerCache {
    Input(Array2<f64>),
    Mask(Array2<f64>),
    Columns(Vec<Array2<f64>>),
    Argmax(Vec<usize>),
    None,
}

/// Everything `backward` needs from a forward pass.
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

pub struct ForwardPass {
    /// Output of the last layer: latent features, or logits when a head is present.
    pub output: Array2<f64>,
    /// Activation after the latent layer.
    pub latent: Array2<f64>,
    pub cache: ForwardCache,
}

/// Parameter gradients in the order of the network's parametric layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<ParamPair>,
}

impl Grads {
    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.layers {
            p.w *= factor;
            p.b *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|p| p.w.iter().chain(p.b.iter()).all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    input: Shape,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    latent_layers: usize,
    version: u64,
}

fn conv_out(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

impl Network {
    /// Builds and He-initialises a network. The first `latent_layers` layers
    /// produce the latent features; any remaining layers form a head.
    pub fn new(input: Shape, specs: &[LayerSpec], latent_layers: usize, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialised(input, specs, latent_layers)?;
        let mut rng = seed::rng_for(seed, seed::STREAM_INIT);
        for layer in &mut net.layers {
            if let Some(p) = layer.params_mut() {
                let fan_in = p.w.len() / p.b.len();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                p.w.mapv_inplace(|_| normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Same layout as [`Network::new`] with every parameter zero.
    pub fn uninitialised(input: Shape, specs: &[LayerSpec], latent_layers: usize) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        if latent_layers == 0 || latent_layers > specs.len() {
            return Err(Error::Argument(format!(
                "latent layer count {latent_layers} outside 1..={}",
                specs.len()
            )));
        }
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { input, output } => {
                    if shape.len() != input || input == 0 || output == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i} ({spec}) receives {} features",
                            shape.len()
                        )));
                    }
                    shape = Shape::flat(output);
                    Layer::Dense(ParamPair {
                        w: Array2::zeros((input, output)),
                        b: Array1::zeros(output),
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Conv3x3 { in_ch, out_ch, stride } => {
                    if shape.c != in_ch || shape.h < 1 || shape.w < 1 || stride == 0 || out_ch == 0 {
                        return Err(Error::Shape(format!("layer {i} ({spec}) receives {shape}")));
                    }
                    let out = Shape::image(out_ch, conv_out(shape.h, stride), conv_out(shape.w, stride));
                    let layer = Layer::Conv {
                        params: ParamPair {
                            w: Array2::zeros((out_ch, in_ch * 9)),
                            b: Array1::zeros(out_ch),
                        },
                        stride,
                        input: shape,
                        output: out,
                    };
                    shape = out;
                    layer
                }
                LayerSpec::MaxPool2x2 => {
                    if shape.h < 2 || shape.w < 2 {
                        return Err(Error::Shape(format!("layer {i} ({spec}) receives {shape}")));
                    }
                    let out = Shape::image(shape.c, shape.h / 2, shape.w / 2);
                    let layer = Layer::MaxPool { input: shape, output: out };
                    shape = out;
                    layer
                }
                LayerSpec::Flatten => {
                    shape = Shape::flat(shape.len());
                    Layer::Flatten
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            input,
            specs: specs.to_vec(),
            layers,
            latent_layers,
            version: 0,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn latent_layers(&self) -> usize {
        self.latent_layers
    }

    pub fn has_head(&self) -> bool {
        self.latent_layers < self.layers.len()
    }

    fn shape_after(&self, count: usize) -> Shape {
        let mut shape = self.input;
        for layer in &self.layers[..count] {
            shape = match layer {
                Layer::Dense(p) => Shape::flat(p.b.len()),
                Layer::Conv { output, .. } | Layer::MaxPool { output, .. } => *output,
                Layer::Flatten => Shape::flat(shape.len()),
                Layer::Relu => shape,
            };
        }
        shape
    }

    pub fn latent_dim(&self) -> usize {
        self.shape_after(self.latent_layers).len()
    }

    pub fn output_dim(&self) -> usize {
        self.shape_after(self.layers.len()).len()
    }

    /// Bumped by every parameter update; caches from older versions are rejected.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_pairs(&self) -> impl Iterator<Item = &ParamPair> {
        self.layers.iter().filter_map(Layer::params)
    }

    pub fn param_pairs_mut(&mut self) -> impl Iterator<Item = &mut ParamPair> {
        self.version += 1;
        self.layers.iter_mut().filter_map(Layer::params_mut)
    }

    pub fn param_count(&self) -> usize {
        self.param_pairs().map(ParamPair::len).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (li, p) in self.param_pairs().enumerate() {
            if index < p.len() {
                return (li, index);
            }
            index -= p.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter by flat index (layers in order, weights row-major then biases).
    pub fn param(&self, index: usize) -> f64 {
        let (li, i) = self.locate(index);
        self.param_pairs().nth(li).unwrap().get(i)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (li, i) = self.locate(index);
        self.param_pairs_mut().nth(li).unwrap().set(i, value);
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            layers: self.param_pairs().map(ParamPair::zeros_like).collect(),
        }
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input.len() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {} ({})",
                x.ncols(),
                self.input.len(),
                self.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.to_owned();
        let mut latent = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = forward_layer(layer, act, true);
            caches.push(cache);
            act = next;
            if i + 1 == self.latent_layers {
                latent = Some(act.clone());
            }
        }
        Ok(ForwardPass {
            latent: latent.unwrap(),
            output: act,
            cache: ForwardCache {
                version: self.version,
                batch: x.nrows(),
                layers: caches,
            },
        })
    }

    /// Forward pass without caches. Returns `(output, latent)`.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let mut act = x.to_owned();
        let mut latent = None;
        for (i, layer) in self.layers.iter().enumerate() {
            act = forward_layer(layer, act, false).0;
            if i + 1 == self.latent_layers {
                latent = Some(act.clone());
            }
        }
        Ok((act, latent.unwrap()))
    }

    /// Backpropagates `grad_output` (`B × output_dim`). The input gradient is
    /// only formed when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: ArrayView2<f64>,
        want_input_grad: bool,
    ) -> Result<(Grads, Option<Array2<f64>>)> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("cache belongs to a different network".into()));
        }
        if grad_output.dim() != (cache.batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({}, {})",
                grad_output.dim(),
                cache.batch,
                self.output_dim()
            )));
        }
        let mut grads: Vec<ParamPair> = Vec::new();
        let mut g = grad_output.to_owned();
        let first_needed = if want_input_grad { 0 } else { 1 };
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let need_input = i >= first_needed;
            let (gin, pg) = backward_layer(layer, lc, g, need_input);
            if let Some(pg) = pg {
                grads.push(pg);
            }
            match gin {
                Some(next) => g = next,
                None => {
                    g = Array2::zeros((0, 0));
                }
            }
        }
        grads.reverse();
        let input_grad = if want_input_grad { Some(g) } else { None };
        Ok((Grads { layers: grads }, input_grad))
    }
}

fn forward_layer(layer: &Layer, x: Array2<f64>, keep: bool) -> (Array2<f64>, LayerCache) {
    match layer {
        Layer::Dense(p) => {
            let mut out = x.dot(&p.w);
            out += &p.b;
            (out, if keep { LayerCache::Input(x) } else { LayerCache::None })
        }
        Layer::Relu => {
            let out = x.mapv(|v| v.max(0.0));
            (out.clone(), if keep { LayerCache::Mask(out) } else { LayerCache::None })
        }
        Layer::Conv {
            params,
            stride,
            input,
            output,
        } => {
            let b = x.nrows();
            let mut out = Array2::<f64>::zeros((b, output.len()));
            let mut cols_all = Vec::with_capacity(if keep { b } else { 0 });
            for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                let cols = im2col(row.as_slice().unwrap(), *input, *output, *stride);
                let mut y = params.w.dot(&cols);
                for (mut ch, bias) in y.rows_mut().into_iter().zip(params.b.iter()) {
                    ch += *bias;
                }
                dst.assign(&Array1::from_iter(y.iter().copied()));
                if keep {
                    cols_all.push(cols);
                }
            }
            (out, if keep { LayerCache::Columns(cols_all) } else { LayerCache::None })
        }
        Layer::MaxPool { input, output } => {
            let b = x.nrows();
            let mut out = Array2::<f64>::zeros((b, output.len()));
            let mut arg = Vec::with_capacity(if keep { b * output.len() } else { 0 });
            for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                for c in 0..output.c {
                    for oy in 0..output.h {
                        for ox in 0..output.w {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = c * input.h * input.w + (2 * oy + dy) * input.w + 2 * ox + dx;
                                    if row[idx] > best_v || best == usize::MAX {
                                        best_v = row[idx];
                                        best = idx;
                                    }
                                }
                            }
                            dst[c * output.h * output.w + oy * output.w + ox] = best_v;
                            if keep {
                                arg.push(best);
                            }
                        }
                    }
                }
            }
            (out, if keep { LayerCache::Argmax(arg) } else { LayerCache::None })
        }
        Layer::Flatten => (x, LayerCache::None),
    }
}

fn backward_layer(
    layer: &Layer,
    cache: &LayerCache,
    g: Array2<f64>,
    need_input: bool,
) -> (Option<Array2<f64>>, Option<ParamPair>) {
    match (layer, cache) {
        (Layer::Dense(p), LayerCache::Input(x)) => {
            let gw = x.t().dot(&g);
            let gb = g.sum_axis(Axis(0));
            let gin = need_input.then(|| g.dot(&p.w.t()));
            (gin, Some(ParamPair { w: gw, b: gb }))
        }
        (Layer::Relu, LayerCache::Mask(out)) => {
            let mut g = g;
            ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            (Some(g), None)
        }
        (
            Layer::Conv {
                params,
                stride,
                input,
                output,
            },
            LayerCache::Columns(cols_all),
        ) => {
            let hw = output.h * output.w;
            let mut gw = Array2::<f64>::zeros(params.w.raw_dim());
            let mut gb = Array1::<f64>::zeros(params.b.raw_dim());
            let mut gin = need_input.then(|| Array2::<f64>::zeros((g.nrows(), input.len())));
            for (i, (grow, cols)) in g.rows().into_iter().zip(cols_all).enumerate() {
                let gy = grow.to_owned().into_shape_with_order((output.c, hw)).unwrap();
                gw += &gy.dot(&cols.t());
                gb += &gy.sum_axis(Axis(1));
                if let Some(gin) = gin.as_mut() {
                    let gcols = params.w.t().dot(&gy);
                    col2im(&gcols, *input, *output, *stride, gin.row_mut(i).as_slice_mut().unwrap());
                }
            }
            (gin, Some(ParamPair { w: gw, b: gb }))
        }
        (Layer::MaxPool { input, output }, LayerCache::Argmax(arg)) => {
            let per = output.len();
            let mut gin = Array2::<f64>::zeros((g.nrows(), input.len()));
            for (i, (grow, mut dst)) in g.rows().into_iter().zip(gin.rows_mut()).enumerate() {
                for (j, v) in grow.iter().enumerate() {
                    dst[arg[i * per + j]] += *v;
                }
            }
            (Some(gin), None)
        }
        (Layer::Flatten, LayerCache::None) => (Some(g), None),
        _ => unreachable!("cache kind does not match layer kind"),
    }
}

/// `(in_ch · 9) × (out_h · out_w)` patch matrix with zero padding of one pixel.
fn im2col(x: &[f64], input: Shape, output: Shape, stride: usize) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((input.c * 9, output.h * output.w));
    for c in 0..input.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = c * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(r);
                for oy in 0..output.h {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for ox in 0..output.w {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        dst[oy * output.w + ox] = x[c * input.h * input.w + iy as usize * input.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, input: Shape, output: Shape, stride: usize, dst: &mut [f64]) {
    for c in 0..input.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(c * 9 + ky * 3 + kx);
                for oy in 0..output.h {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for ox in 0..output.w {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        dst[c * input.h * input.w + iy as usize * input.w + ix as usize] += src[oy * output.w + ox];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub layers: Vec<ParamPair>,
}

impl Momentum {
    pub fn zeros_for(net: &Network) -> Self {
        Self {
            layers: net.param_pairs().map(ParamPair::zeros_like).collect(),
        }
    }
}

/// `g' = g + wd·w; v ← μ·v + g'; w ← w − lr·v`, applied to weights and biases.
pub fn sgd_step(net: &mut Network, grads: &Grads, momentum: &mut Momentum, cfg: SgdConfig) -> Result<()> {
    if grads.layers.len() != momentum.layers.len() {
        return Err(Error::Shape("gradient and momentum layer counts differ".into()));
    }
    for ((p, g), v) in net.param_pairs_mut().zip(&grads.layers).zip(&mut momentum.layers) {
        if p.w.dim() != g.w.dim() || p.b.dim() != g.b.dim() || p.w.dim() != v.w.dim() {
            return Err(Error::Shape("gradient shape does not match parameters".into()));
        }
        update(p.w.as_slice_mut().unwrap(), g.w.as_slice().unwrap(), v.w.as_slice_mut().unwrap(), cfg);
        update(p.b.as_slice_mut().unwrap(), g.b.as_slice().unwrap(), v.b.as_slice_mut().unwrap(), cfg);
    }
    Ok(())
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], cfg: SgdConfig) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + cfg.weight_decay * *w;
        *v = cfg.momentum * *v + g;
        *w -= cfg.lr * *v;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Parameters to probe; all of them when the network has fewer.
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Flip the sign of the analytic gradient. A checker that passes with
    /// this set is broken.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-5,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes skipped because the loss has a kink (a ReLU or max-pool switch)
    /// within one step of the parameter. Central differences at `h` and `h/2`
    /// agree to `O(h²)` on smooth functions and disagree across a kink.
    pub kinks: usize,
}

const KINK_TOL: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for comparing against a central difference of a loss
/// of size `value` with step `h`. A few ulps of the loss over `2h` is the
/// smallest derivative the difference can resolve; gradients below `1e5`
/// ulps over `h` are compared in absolute terms so that rounding alone stays
/// under a relative error of `1e-4`.
pub fn fd_floor(value: f64, h: f64) -> f64 {
    (1e5 * f64::EPSILON * value.abs().max(1.0) / h).max(1e-8)
}

fn central_difference<F>(probe: &mut Network, idx: usize, h: f64, input: ArrayView2<f64>, loss: &mut F) -> Result<f64>
where
    F: FnMut(ArrayView2<f64>) -> Result<LossBundle>,
{
    let orig = probe.param(idx);
    probe.set_param(idx, orig + h);
    let plus = loss(probe.infer(input)?.0.view())?.value;
    probe.set_param(idx, orig - h);
    let minus = loss(probe.infer(input)?.0.view())?.value;
    probe.set_param(idx, orig);
    Ok((plus - minus) / (2.0 * h))
}

/// Compares backprop parameter gradients of `loss ∘ forward` with central
/// finite differences on a random subset of parameters.
pub fn grad_check<F>(net: &Network, input: ArrayView2<f64>, mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(ArrayView2<f64>) -> Result<LossBundle>,
{
    let pass = net.forward(input)?;
    let bundle = loss(pass.output.view())?;
    let (grads, _) = net.backward(&pass.cache, bundle.grad.view(), false)?;
    let flat: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|p| p.w.iter().chain(p.b.iter()).copied())
        .collect();

    let total = net.param_count();
    let mut rng = seed::rng_for(opts.seed, seed::STREAM_GRADCHECK);
    let picks: Vec<usize> = if total <= opts.samples {
        (0..total).collect()
    } else {
        sample(&mut rng, total, opts.samples).into_vec()
    };

    let floor = fd_floor(bundle.value, opts.step);
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for &idx in &picks {
        let numeric = central_difference(&mut probe, idx, opts.step, input, &mut loss)?;
        let half = central_difference(&mut probe, idx, opts.step / 2.0, input, &mut loss)?;
        if relative_error(numeric, half) > KINK_TOL {
            kinks += 1;
            continue;
        }
        let analytic = if opts.corrupt { -flat[idx] } else { flat[idx] };
        worst = worst.max(relative_error_floored(analytic, numeric, floor));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: picks.len() - kinks,
        kinks,
    })
}

const CKPT_MAGIC: &[u8; 4] = b"PODN";
const CKPT_VERSION: u32 = 1;

fn layer_descriptor(spec: &LayerSpec) -> [u32; 4] {
    match *spec {
        LayerSpec::Dense { input, output } => [0, input as u32, output as u32, 0],
        LayerSpec::Relu => [1, 0, 0, 0],
        LayerSpec::Conv3x3 { in_ch, out_ch, stride } => [2, in_ch as u32, out_ch as u32, stride as u32],
        LayerSpec::MaxPool2x2 => [3, 0, 0, 0],
        LayerSpec::Flatten => [4, 0, 0, 0],
    }
}

fn layer_from_descriptor(d: [u32; 4]) -> Option<LayerSpec> {
    let [tag, a, b, c] = d.map(|v| v as usize);
    Some(match tag {
        0 => LayerSpec::Dense { input: a, output: b },
        1 => LayerSpec::Relu,
        2 => LayerSpec::Conv3x3 { in_ch: a, out_ch: b, stride: c },
        3 => LayerSpec::MaxPool2x2,
        4 => LayerSpec::Flatten,
        _ => return None,
    })
}

/// Checkpoint layout (all integers `u32` little-endian):
///
/// ```text
/// "PODN" version layer_count in_c in_h in_w latent_layers
/// layer_count × [tag a b c]      dense=0(in,out) relu=1 conv=2(in,out,stride) maxpool=3 flatten=4
/// parameters                     per parametric layer: weights row-major, then biases (f64 LE)
/// has_momentum                   0 or 1, followed by momentum buffers in parameter layout
/// ```
pub fn write_checkpoint(net: &Network, momentum: Option<&Momentum>, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(CKPT_MAGIC)?;
    let header = [
        CKPT_VERSION,
        net.layers.len() as u32,
        net.input.c as u32,
        net.input.h as u32,
        net.input.w as u32,
        net.latent_layers as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    for spec in &net.specs {
        for v in layer_descriptor(spec) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    let write_pairs = |out: &mut dyn Write, pairs: &mut dyn Iterator<Item = &ParamPair>| -> std::io::Result<()> {
        for p in pairs {
            for v in p.w.iter().chain(p.b.iter()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    write_pairs(&mut out, &mut net.param_pairs())?;
    match momentum {
        Some(m) => {
            out.write_all(&1u32.to_le_bytes())?;
            write_pairs(&mut out, &mut m.layers.iter())?;
        }
        None => out.write_all(&0u32.to_le_bytes())?,
    }
    Ok(())
}

pub fn save_checkpoint(net: &Network, momentum: Option<&Momentum>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, momentum, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<Momentum>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::format(self.path, self.pos as u64, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill<'p>(&mut self, pairs: impl Iterator<Item = &'p mut ParamPair>) -> Result<()> {
        for p in pairs {
            for v in p.w.iter_mut().chain(p.b.iter_mut()) {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(Network, Option<Momentum>)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"PODN\""));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let input = Shape::image(cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let latent_layers = cur.u32()? as usize;
    let mut specs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let offset = cur.pos;
        let d = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?];
        specs.push(
            layer_from_descriptor(d)
                .ok_or_else(|| Error::format(path, offset as u64, format!("unknown layer tag {}", d[0])))?,
        );
    }
    let mut net = Network::uninitialised(input, &specs, latent_layers)?;
    cur.fill(net.layers.iter_mut().filter_map(Layer::params_mut))?;
    let momentum = match cur.u32()? {
        0 => None,
        1 => {
            let mut m = Momentum::zeros_for(&net);
            cur.fill(m.layers.iter_mut())?;
            Some(m)
        }
        other => {
            return Err(Error::format(path, cur.pos as u64 - 4, format!("bad momentum flag {other}")));
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::format(path, cur.pos as u64, "trailing bytes after checkpoint"));
    }
    Ok((net, momentum))
}

/// Standard MLP backbone `input → hidden... → latent` with ReLU between
/// layers and no activation after the latent layer.
pub fn mlp_specs(input: usize, hidden: &[usize], latent: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec::Dense { input: prev, output: h });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Dense { input: prev, output: latent });
    specs
}

/// Three conv/ReLU/pool blocks followed by a dense latent layer.
pub fn small_cnn_specs(input: Shape, widths: [usize; 3], latent: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut c = input.c;
    let (mut h, mut w) = (input.h, input.w);
    for width in widths {
        specs.push(LayerSpec::Conv3x3 { in_ch: c, out_ch: width, stride: 1 });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::MaxPool2x2);
        c = width;
        h /= 2;
        w /= 2;
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Dense { input: c * h * w, output: latent });
    specs
}

/// Appends a dense `latent → classes` head used by the softmax baseline.
pub fn with_linear_head(mut specs: Vec<LayerSpec>, latent: usize, classes: usize) -> Vec<LayerSpec> {
    specs.push(LayerSpec::Dense { input: latent, output: classes });
    specs
}

/// Rows `start..end` of a matrix as an owned batch.
pub fn rows(x: ArrayView2<f64>, start: usize, end: usize) -> Array2<f64> {
    x.slice(s![start..end, ..]).to_owned()
}
