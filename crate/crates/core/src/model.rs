//! The interpolation network: a HetConv U-Net encoder-decoder followed by
//! kernel, offset, mask and bias estimators feeding the deformable separable
//! synthesis.
//!
//! The decoder stops at half resolution; each estimator applies three 3x3
//! conv + ReLU layers, a bilinear x2 upsample and a final 3x3 conv. With
//! `multi_time` the frame-1 estimators see an extra constant plane holding `t`
//! and the frame-2 estimators one holding `1 - t`. The bias estimator only sees
//! the decoder features.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{EdscNodes, Graph, HetPlan, NodeId};
use crate::deformable::{
    edsc_forward, naive_time_rescale, BiasField, MaskField, OffsetField, SepKernelField,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Taps per side of the separable kernels (odd).
    pub kernel_size: usize,
    /// HetConv part: `1/P` of each filter's input channels use 3x3 kernels.
    /// Layers with fewer than `P` inputs use `P = cin`.
    pub hetconv_p: usize,
    /// Encoder widths from full resolution down to the bottleneck.
    pub widths: Vec<usize>,
    /// HetConv layers per encoder/decoder level.
    pub block_depth: usize,
    /// Widths of the three hidden conv layers of every estimator.
    pub estimator_widths: [usize; 3],
    pub multi_time: bool,
    pub use_mask: bool,
    pub use_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel_size: 5,
            hetconv_p: 4,
            widths: vec![16, 32, 64, 128],
            block_depth: 2,
            estimator_widths: [32, 16, 16],
            multi_time: false,
            use_mask: true,
            use_bias: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Widths in the style of the original SepConv backbone, for parameter and
    /// FLOP accounting.
    pub fn full_scale() -> Self {
        ModelConfig {
            widths: vec![32, 64, 128, 256, 512, 512],
            block_depth: 3,
            estimator_widths: [64, 32, 32],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::Config("need at least two encoder levels".into()));
        }
        if self.widths.iter().chain(&self.estimator_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.block_depth == 0 {
            return Err(Error::Config("block depth must be positive".into()));
        }
        if self.hetconv_p == 0 {
            return Err(Error::Config("HetConv part must be positive".into()));
        }
        Ok(())
    }

    /// Frames must be divisible by this in both dimensions.
    pub fn resolution_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    fn decoder_channels(&self) -> usize {
        self.widths[1]
    }

    /// Every learnable layer in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let p = self.hetconv_p;
        let mut out = Vec::new();
        let levels = self.widths.len();
        for (l, &w) in self.widths.iter().enumerate() {
            let mut cin = if l == 0 { 6 } else { self.widths[l - 1] };
            for i in 0..self.block_depth {
                out.push(LayerSpec {
                    name: format!("enc{}.{}", l, i),
                    kind: LayerKind::Het { cin, cout: w, p: p.min(cin) },
                    scale: 1 << l,
                });
                cin = w;
            }
        }
        let mut below = self.widths[levels - 1];
        for l in (1..levels - 1).rev() {
            let w = self.widths[l];
            let mut cin = below + w;
            for i in 0..self.block_depth {
                out.push(LayerSpec {
                    name: format!("dec{}.{}", l, i),
                    kind: LayerKind::Het { cin, cout: w, p: p.min(cin) },
                    scale: 1 << l,
                });
                cin = w;
            }
            below = w;
        }
        for head in self.heads() {
            let feat = self.decoder_channels() + usize::from(self.multi_time && head.timed());
            let [e0, e1, e2] = self.estimator_widths;
            let chans = [(feat, e0), (e0, e1), (e1, e2)];
            for (i, &(cin, cout)) in chans.iter().enumerate() {
                out.push(LayerSpec {
                    name: format!("est.{}.{}", head.name(), i),
                    kind: LayerKind::Conv { cin, cout, k: 3 },
                    scale: 2,
                });
            }
            out.push(LayerSpec {
                name: format!("est.{}.3", head.name()),
                kind: LayerKind::Conv {
                    cin: e2,
                    cout: head.depth(self.kernel_size),
                    k: 3,
                },
                scale: 1,
            });
        }
        out
    }

    pub fn heads(&self) -> Vec<Head> {
        let mut h = vec![
            Head::K1v,
            Head::K1h,
            Head::K2v,
            Head::K2h,
            Head::Off1y,
            Head::Off1x,
            Head::Off2y,
            Head::Off2x,
        ];
        if self.use_mask {
            h.extend([Head::Mask1, Head::Mask2]);
        }
        if self.use_bias {
            h.push(Head::Bias);
        }
        h
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("model.kernel_size".into(), self.kernel_size.to_string()),
            ("model.hetconv_p".into(), self.hetconv_p.to_string()),
            ("model.widths".into(), list(&self.widths)),
            ("model.block_depth".into(), self.block_depth.to_string()),
            ("model.estimator_widths".into(), list(&self.estimator_widths)),
            ("model.multi_time".into(), self.multi_time.to_string()),
            ("model.use_mask".into(), self.use_mask.to_string()),
            ("model.use_bias".into(), self.use_bias.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies recognised `model.*` keys and `seed`; other keys are ignored.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {:?} for {}", value, key));
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
                .collect()
        };
        match key {
            "model.kernel_size" => self.kernel_size = value.parse().map_err(|_| bad())?,
            "model.hetconv_p" => self.hetconv_p = value.parse().map_err(|_| bad())?,
            "model.widths" => self.widths = list(value)?,
            "model.block_depth" => self.block_depth = value.parse().map_err(|_| bad())?,
            "model.estimator_widths" => {
                self.estimator_widths = list(value)?.try_into().map_err(|_| bad())?
            }
            "model.multi_time" => self.multi_time = value.parse().map_err(|_| bad())?,
            "model.use_mask" => self.use_mask = value.parse().map_err(|_| bad())?,
            "model.use_bias" => self.use_bias = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            c.apply_kv(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// One estimator sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    K1v,
    K1h,
    K2v,
    K2h,
    Off1y,
    Off1x,
    Off2y,
    Off2x,
    Mask1,
    Mask2,
    Bias,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::K1v => "k1v",
            Head::K1h => "k1h",
            Head::K2v => "k2v",
            Head::K2h => "k2h",
            Head::Off1y => "off1y",
            Head::Off1x => "off1x",
            Head::Off2y => "off2y",
            Head::Off2x => "off2x",
            Head::Mask1 => "mask1",
            Head::Mask2 => "mask2",
            Head::Bias => "bias",
        }
    }

    fn depth(self, n: usize) -> usize {
        match self {
            Head::K1v | Head::K1h | Head::K2v | Head::K2h => n,
            Head::Bias => 3,
            _ => n * n,
        }
    }

    /// Which time plane the head receives in multi-time models.
    fn time_plane(self, t: f64) -> Option<f64> {
        match self {
            Head::K1v | Head::K1h | Head::Off1y | Head::Off1x | Head::Mask1 => Some(t),
            Head::K2v | Head::K2h | Head::Off2y | Head::Off2x | Head::Mask2 => Some(1.0 - t),
            Head::Bias => None,
        }
    }

    fn timed(self) -> bool {
        self.time_plane(0.5).is_some()
    }

    fn is_offset(self) -> bool {
        matches!(self, Head::Off1y | Head::Off1x | Head::Off2y | Head::Off2x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Het { cin: usize, cout: usize, p: usize },
    Conv { cin: usize, cout: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Downsampling factor of the layer's output relative to the frame.
    pub scale: usize,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Het { cin, cout, p } => {
                let g = cin.div_ceil(p);
                cout * (9 * g + cin - g)
            }
            LayerKind::Conv { cin, cout, k } => cout * cin * k * k,
        }
    }

    pub fn param_count(&self) -> usize {
        let cout = match self.kind {
            LayerKind::Het { cout, .. } | LayerKind::Conv { cout, .. } => cout,
        };
        self.weight_count() + cout
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> usize {
        self.weight_count()
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Het { cout, .. } => self.weight_count() / cout.max(1),
            LayerKind::Conv { cin, k, .. } => cin * k * k,
        }
    }
}

/// A time step strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimeStep(f64);

impl TimeStep {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t < 1.0 {
            Ok(TimeStep(t))
        } else {
            Err(Error::invalid(format!("time step {} outside (0, 1)", t)))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Named, ordered parameter tensors plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_parts(config: ModelConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if entries.len() != expected.len() {
            return Err(Error::Config(format!(
                "{} tensors for a model with {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, eshape)) in entries.iter().zip(&expected) {
            if name != ename || t.shape() != *eshape {
                return Err(Error::Config(format!(
                    "tensor {} {} does not match expected {} {}",
                    name,
                    t.shape(),
                    ename,
                    eshape
                )));
            }
        }
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(ModelParams {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Same names and shapes, different values.
    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.iter().map(|(n, t)| f(n, t)).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn register(&self, g: &mut Graph<T>) -> Result<ParamNodes> {
        let ids = self
            .tensors
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamNodes {
            ids,
            index: self.index.clone(),
        })
    }

    /// Names existing graph nodes, given in parameter order, as this model's
    /// parameters.
    pub fn bind(&self, ids: &[NodeId]) -> Result<ParamNodes> {
        if ids.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "{} nodes for {} parameters",
                ids.len(),
                self.tensors.len()
            )));
        }
        Ok(ParamNodes {
            ids: ids.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Registers every tensor as a constant input of `g`.
    pub fn register_frozen(&self, g: &mut Graph<T>) -> Result<ParamNodes> {
        let ids = self
            .tensors
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamNodes {
            ids,
            index: self.index.clone(),
        })
    }
}

/// Graph node of every parameter, by name.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {}", name)))
    }

    /// Node ids in parameter order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    for layer in config.layers() {
        match layer.kind {
            LayerKind::Het { cin, cout, p } => {
                let g = cin.div_ceil(p);
                out.push((format!("{}.w3", layer.name), Shape::new(cout, g, 3, 3)));
                out.push((format!("{}.w1", layer.name), Shape::new(cout, cin - g, 1, 1)));
                out.push((format!("{}.b", layer.name), Shape::new(1, 1, 1, cout)));
            }
            LayerKind::Conv { cin, cout, k } => {
                out.push((format!("{}.w", layer.name), Shape::new(cout, cin, k, k)));
                out.push((format!("{}.b", layer.name), Shape::new(1, 1, 1, cout)));
            }
        }
    }
    out
}

/// Deterministic initialisation: Kaiming-uniform weights (fan-in), zero
/// biases, and a zeroed final offset layer so a fresh model samples on the
/// regular grid.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut config = config.clone();
    config.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config.layers();
    let mut entries = Vec::new();
    let mut shapes = expected_shapes(&config).into_iter();
    for layer in &layers {
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        let zero = layer.name.starts_with("est.off") && layer.name.ends_with(".3");
        let n_tensors = match layer.kind {
            LayerKind::Het { .. } => 3,
            LayerKind::Conv { .. } => 2,
        };
        for i in 0..n_tensors {
            let (name, shape) = shapes.next().expect("shape per tensor");
            let is_bias = i == n_tensors - 1;
            let t = if is_bias || zero {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            };
            entries.push((name, t));
        }
    }
    ModelParams::from_parts(config, entries)
}

pub fn count_params<T: Real>(params: &ModelParams<T>) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

/// FLOPs of one forward pass at `height x width`: twice the multiply-accumulates
/// of every convolution layer. Pooling, upsampling, activations and the
/// synthesis step are not counted.
pub fn count_flops(config: &ModelConfig, height: usize, width: usize) -> u64 {
    2 * count_macs(config, height, width)
}

pub fn count_macs(config: &ModelConfig, height: usize, width: usize) -> u64 {
    config
        .layers()
        .iter()
        .map(|l| {
            let px = (height / l.scale) * (width / l.scale);
            (l.macs_per_pixel() * px) as u64
        })
        .sum()
}

/// Estimated fields for a batch, as tensors.
#[derive(Debug, Clone)]
pub struct Fields<T> {
    pub kernels: SepKernelField<T>,
    pub offsets: OffsetField<T>,
    pub masks: MaskField<T>,
    pub bias: BiasField<T>,
}

/// Node ids of a forward pass recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub synthesis: EdscNodes,
}

impl ForwardNodes {
    pub fn fields<T: Real>(&self, g: &Graph<T>) -> Fields<T> {
        let v = |id| g.value(id).clone();
        let s = &self.synthesis;
        Fields {
            kernels: SepKernelField {
                k1v: v(s.k1v),
                k1h: v(s.k1h),
                k2v: v(s.k2v),
                k2h: v(s.k2h),
            },
            offsets: OffsetField {
                off1: v(s.offset1),
                off2: v(s.offset2),
            },
            masks: MaskField {
                mask1: v(s.mask1),
                mask2: v(s.mask2),
            },
            bias: BiasField { bias: v(s.bias) },
        }
    }
}

fn check_time(config: &ModelConfig, t: Option<TimeStep>) -> Result<Option<f64>> {
    match (config.multi_time, t) {
        (true, Some(t)) => Ok(Some(t.get())),
        (true, None) => Err(Error::invalid("multi-time model needs a time step")),
        (false, Some(_)) => Err(Error::invalid(
            "single-time model synthesises the midpoint only; do not pass a time step",
        )),
        (false, None) => Ok(None),
    }
}

/// Records a forward pass on `g`. `i1` and `i2` are `[B, 3, H, W]` nodes.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    p: &ParamNodes,
    i1: NodeId,
    i2: NodeId,
    t: Option<TimeStep>,
) -> Result<ForwardNodes> {
    let t = check_time(config, t)?;
    let s = g.shape(i1);
    if g.shape(i2) != s || s.channels != 3 {
        return Err(Error::shape(
            "forward",
            format!("frames {} and {} must both be [B, 3, H, W]", s, g.shape(i2)),
        ));
    }
    let m = config.resolution_multiple();
    if s.height == 0 || s.width == 0 || s.height % m != 0 || s.width % m != 0 {
        return Err(Error::shape(
            "forward",
            format!("{}x{} frames must be non-empty multiples of {}", s.height, s.width, m),
        ));
    }
    let plans = het_plans(config)?;
    let het = |g: &mut Graph<T>, x: NodeId, name: &str| -> Result<NodeId> {
        let y = g.hetconv2d(
            x,
            p.get(&format!("{}.w3", name))?,
            p.get(&format!("{}.w1", name))?,
            p.get(&format!("{}.b", name))?,
            plans[name].clone(),
        )?;
        g.relu(y)
    };

    let mut x = g.concat_channels(i1, i2)?;
    let levels = config.widths.len();
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            x = g.avg_pool2x2(x)?;
        }
        for i in 0..config.block_depth {
            x = het(g, x, &format!("enc{}.{}", l, i))?;
        }
        skips.push(x);
    }
    for l in (1..levels - 1).rev() {
        let up = g.upsample_bilinear2x(x)?;
        x = g.concat_channels(up, skips[l])?;
        for i in 0..config.block_depth {
            x = het(g, x, &format!("dec{}.{}", l, i))?;
        }
    }
    let features = x;
    let fs = g.shape(features);

    let mut time_inputs: Vec<(f64, NodeId)> = Vec::new();
    let mut head_out = HashMap::new();
    for head in config.heads() {
        let mut h = features;
        if let (Some(t), Some(tv)) = (t, head.time_plane(t.unwrap_or(0.5))) {
            let _ = t;
            let feat = match time_inputs.iter().find(|(v, _)| *v == tv) {
                Some(&(_, id)) => id,
                None => {
                    let plane = g.input(Tensor::full(fs.with_channels(1), T::lit(tv)))?;
                    let id = g.concat_channels(features, plane)?;
                    time_inputs.push((tv, id));
                    id
                }
            };
            h = feat;
        }
        for i in 0..3 {
            let name = format!("est.{}.{}", head.name(), i);
            h = g.conv2d(h, p.get(&format!("{}.w", name))?, p.get(&format!("{}.b", name))?, 1, 1)?;
            h = g.relu(h)?;
        }
        h = g.upsample_bilinear2x(h)?;
        let name = format!("est.{}.3", head.name());
        h = g.conv2d(h, p.get(&format!("{}.w", name))?, p.get(&format!("{}.b", name))?, 1, 1)?;
        if matches!(head, Head::Mask1 | Head::Mask2) {
            h = g.sigmoid(h)?;
        }
        debug_assert!(!head.is_offset() || g.shape(h).channels == config.kernel_size.pow(2));
        head_out.insert(head.name(), h);
    }

    let n = config.kernel_size;
    let full = Shape::new(s.batch, 1, s.height, s.width);
    let offset1 = g.concat_channels(head_out["off1y"], head_out["off1x"])?;
    let offset2 = g.concat_channels(head_out["off2y"], head_out["off2x"])?;
    let (mask1, mask2) = if config.use_mask {
        (head_out["mask1"], head_out["mask2"])
    } else {
        let ones = g.input(Tensor::full(full.with_channels(n * n), T::one()))?;
        (ones, ones)
    };
    let bias = if config.use_bias {
        head_out["bias"]
    } else {
        g.input(Tensor::zeros(full.with_channels(3)))?
    };
    let synthesis = EdscNodes {
        frame1: i1,
        frame2: i2,
        k1v: head_out["k1v"],
        k1h: head_out["k1h"],
        k2v: head_out["k2v"],
        k2h: head_out["k2h"],
        offset1,
        offset2,
        mask1,
        mask2,
        bias,
    };
    let output = g.edsc(synthesis)?;
    Ok(ForwardNodes { output, synthesis })
}

fn het_plans(config: &ModelConfig) -> Result<HashMap<String, Arc<HetPlan>>> {
    config
        .layers()
        .into_iter()
        .filter_map(|l| match l.kind {
            LayerKind::Het { cin, cout, p } => Some((l.name, cin, cout, p)),
            LayerKind::Conv { .. } => None,
        })
        .map(|(name, cin, cout, p)| Ok((name, Arc::new(HetPlan::new(cin, cout, p)?))))
        .collect()
}

/// Inference: synthesised frames plus the estimated fields.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    t: Option<TimeStep>,
) -> Result<(Tensor<T>, Fields<T>)> {
    let mut g = Graph::new();
    let p = params.register_frozen(&mut g)?;
    let a = g.input(i1.clone())?;
    let b = g.input(i2.clone())?;
    let nodes = forward_graph(&mut g, params.config(), &p, a, b, t)?;
    Ok((g.value(nodes.output).clone(), nodes.fields(&g)))
}

/// Midpoint model with its offsets rescaled to time `t` (frame-1 offsets by
/// `t / 0.5`, frame-2 by `(1 - t) / 0.5`); kernels, masks and bias are those
/// estimated for the midpoint.
pub fn forward_naive_rescale<T: Real>(
    params: &ModelParams<T>,
    i1: &Tensor<T>,
    i2: &Tensor<T>,
    t: TimeStep,
) -> Result<(Tensor<T>, Fields<T>)> {
    if params.config().multi_time {
        return Err(Error::invalid(
            "offset rescaling applies to single-time models only",
        ));
    }
    let (_, mut fields) = forward(params, i1, i2, None)?;
    fields.offsets = naive_time_rescale(&fields.offsets, t.get())?;
    let out = edsc_forward(
        i1,
        i2,
        &fields.kernels,
        &fields.offsets,
        &fields.masks,
        &fields.bias,
    )?;
    Ok((out, fields))
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{}={}", k, v)?;
        }
        Ok(())
    }
}
