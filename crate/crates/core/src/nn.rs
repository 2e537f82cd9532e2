//! Small image classifiers with BatchNorm statistics capture.
//!
//! Parameters live in a flat name -> tensor map. Every architecture is written
//! once as a forward pass over a [`Ctx`]; building a network runs that pass in
//! a mode that creates each parameter (seeded) the first time it is requested,
//! so initialization order is the forward order and fully deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DeltError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    ResNet18,
    ResNet101,
    ConvNet { depth: usize },
    MobileNetV2Small,
    /// Convolution stack without normalization; exists to exercise the
    /// "no BN layers" error path of batch-to-global matching.
    PlainConvNet { depth: usize },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::ResNet18 => f.write_str("resnet18"),
            Architecture::ResNet101 => f.write_str("resnet101"),
            Architecture::ConvNet { depth } => write!(f, "convnet{depth}"),
            Architecture::MobileNetV2Small => f.write_str("mobilenet_v2_small"),
            Architecture::PlainConvNet { depth } => write!(f, "plainconv{depth}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = DeltError;

    fn from_str(s: &str) -> Result<Self> {
        let depth = |rest: &str| rest.parse::<usize>().ok().filter(|d| (1..=8).contains(d));
        match s {
            "resnet18" => Ok(Architecture::ResNet18),
            "resnet101" => Ok(Architecture::ResNet101),
            "mobilenet_v2_small" => Ok(Architecture::MobileNetV2Small),
            _ => {
                if let Some(d) = s.strip_prefix("convnet").and_then(depth) {
                    Ok(Architecture::ConvNet { depth: d })
                } else if let Some(d) = s.strip_prefix("plainconv").and_then(depth) {
                    Ok(Architecture::PlainConvNet { depth: d })
                } else {
                    Err(DeltError::UnknownArchitecture(s.to_string()))
                }
            }
        }
    }
}

/// Parses `cpu` or `cuda[:N]`. CUDA needs a build with candle's `cuda` feature.
pub fn parse_device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Ok(Device::new_cuda(0)?),
        other => match other.strip_prefix("cuda:").and_then(|i| i.parse::<usize>().ok()) {
            Some(i) => Ok(Device::new_cuda(i)?),
            None => Err(DeltError::Config(format!("unknown device `{other}` (expected cpu or cuda[:N])"))),
        },
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Architecture {
    pub fn default_width(&self) -> usize {
        match self {
            Architecture::ResNet18 | Architecture::ResNet101 => 64,
            Architecture::ConvNet { .. } | Architecture::PlainConvNet { .. } => 128,
            Architecture::MobileNetV2Small => 32,
        }
    }
}

/// Everything needed to rebuild a network's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub arch: Architecture,
    pub in_channels: usize,
    pub num_classes: usize,
    pub resolution: usize,
    /// Base channel count (64 for a standard ResNet, 128 for ConvNet, ...).
    pub width: usize,
}

impl NetSpec {
    pub fn new(arch: Architecture, in_channels: usize, num_classes: usize, resolution: usize) -> Self {
        Self {
            arch,
            in_channels,
            num_classes,
            resolution,
            width: arch.default_width(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 || self.num_classes < 2 {
            return Err(DeltError::Config(format!("degenerate network spec {self:?}")));
        }
        match self.arch {
            Architecture::ConvNet { depth } | Architecture::PlainConvNet { depth } => {
                if self.resolution % (1 << depth) != 0 {
                    return Err(DeltError::Config(format!(
                        "{} needs a resolution divisible by {}, got {}",
                        self.arch,
                        1 << depth,
                        self.resolution
                    )));
                }
            }
            Architecture::ResNet18 | Architecture::ResNet101 => {
                if self.resolution < 8 {
                    return Err(DeltError::Config(format!(
                        "{} needs a resolution of at least 8",
                        self.arch
                    )));
                }
            }
            Architecture::MobileNetV2Small => {
                if self.resolution < 16 {
                    return Err(DeltError::Config(format!(
                        "{} needs a resolution of at least 16",
                        self.arch
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-channel statistics of the input to one BN layer.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// A BN layer's globally accumulated statistics.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with running statistics.
    Eval,
    /// Normalize with batch statistics and report running-stat updates.
    Train,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// Penultimate (post-pooling, pre-classifier) features.
    pub features: Tensor,
    /// Captured pre-normalization batch statistics, in forward order.
    pub bn_stats: Vec<BatchStats>,
}

pub struct RunningUpdate {
    name: String,
    mean: Tensor,
    var: Tensor,
}

enum Params<'a> {
    Read(&'a BTreeMap<String, Tensor>),
    Build {
        map: &'a mut BTreeMap<String, Tensor>,
        rng: &'a mut ChaCha8Rng,
        dtype: DType,
        device: &'a Device,
    },
}

struct Ctx<'a> {
    params: Params<'a>,
    mode: BnMode,
    capture: bool,
    stats: Vec<BatchStats>,
    updates: Vec<RunningUpdate>,
    bn_names: Vec<String>,
}

enum Init {
    /// Kaiming normal, fan-out mode, ReLU gain.
    KaimingFanOut { fan_out: usize },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform { fan_in: usize },
    Const(f64),
}

impl<'a> Ctx<'a> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match &mut self.params {
            Params::Read(map) => map
                .get(name)
                .cloned()
                .ok_or_else(|| DeltError::Shape(format!("missing parameter `{name}`"))),
            Params::Build {
                map,
                rng,
                dtype,
                device,
            } => {
                if let Some(t) = map.get(name) {
                    return Ok(t.clone());
                }
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::KaimingFanOut { fan_out } => {
                        let std = (2.0 / fan_out as f64).sqrt();
                        (0..n)
                            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                            .collect()
                    }
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Const(v) => vec![v; n],
                };
                let t = Tensor::from_vec(values, shape, device)?.to_dtype(*dtype)?;
                map.insert(name.to_string(), t.clone());
                Ok(t)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: &Tensor,
        name: &str,
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Tensor> {
        let cin = x.dim(1)?;
        let w = self.param(
            &format!("{name}.weight"),
            &[out, cin / groups, k, k],
            Init::KaimingFanOut { fan_out: out * k * k / groups },
        )?;
        let mut y = conv2d(x, &w, pad, stride, groups)?;
        if bias {
            let b = self.param(
                &format!("{name}.bias"),
                &[out],
                Init::Uniform { fan_in: cin / groups * k * k },
            )?;
            y = y.broadcast_add(&b.reshape((1, out, 1, 1))?)?;
        }
        Ok(y)
    }

    fn linear(&mut self, x: &Tensor, name: &str, out: usize) -> Result<Tensor> {
        let cin = x.dim(1)?;
        let w = self.param(&format!("{name}.weight"), &[out, cin], Init::Uniform { fan_in: cin })?;
        let b = self.param(&format!("{name}.bias"), &[out], Init::Uniform { fan_in: cin })?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    fn batch_norm(&mut self, x: &Tensor, name: &str) -> Result<Tensor> {
        let c = x.dim(1)?;
        let weight = self.param(&format!("{name}.weight"), &[c], Init::Const(1.0))?;
        let bias = self.param(&format!("{name}.bias"), &[c], Init::Const(0.0))?;
        let rm = self.param(&format!("{name}.running_mean"), &[c], Init::Const(0.0))?;
        let rv = self.param(&format!("{name}.running_var"), &[c], Init::Const(1.0))?;
        self.bn_names.push(name.to_string());

        let (n, _, h, w) = x.dims4()?;
        let need_stats = self.capture || self.mode == BnMode::Train;
        let stats = if need_stats {
            if self.capture && n < 2 {
                return Err(DeltError::BatchTooSmall(n));
            }
            if n * h * w < 2 {
                return Err(DeltError::BatchTooSmall(n));
            }
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            Some((mean, var))
        } else {
            None
        };
        if self.capture {
            let (mean, var) = stats.as_ref().expect("computed when capturing");
            self.stats.push(BatchStats {
                mean: mean.flatten_all()?,
                var: var.flatten_all()?,
            });
        }
        let (mean, var) = match self.mode {
            BnMode::Eval => (rm.reshape((1, c, 1, 1))?, rv.reshape((1, c, 1, 1))?),
            BnMode::Train => {
                let (mean, var) = stats.expect("computed in train mode");
                let count = (n * h * w) as f64;
                let unbiased = (var.flatten_all()?.detach() * (count / (count - 1.0)))?;
                self.updates.push(RunningUpdate {
                    name: name.to_string(),
                    mean: ((rm * (1.0 - BN_MOMENTUM))? + (mean.flatten_all()?.detach() * BN_MOMENTUM)?)?,
                    var: ((rv * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?,
                });
                (mean, var)
            }
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
    }
}

/// `Tensor::conv2d` with a guard for candle's tiled CPU kernel, which takes a
/// contiguous NCHW input for channels-last when `c == h == w` (the strides
/// coincide) and returns garbage. A padded-then-narrowed view has distinct
/// strides, so the kernel repacks it correctly.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, pad: usize, stride: usize, groups: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let x = if c == h && h == wd && x.device().is_cpu() {
        x.pad_with_zeros(3, 0, 1)?.narrow(3, 0, wd)?
    } else {
        x.clone()
    };
    Ok(x.conv2d(w, pad, stride, 1, groups)?)
}

/// Keeps indices 0, 2, 4, .. of an odd-length `dim`.
fn every_other(t: &Tensor, dim: usize) -> Result<Tensor> {
    let len = t.dim(dim)?;
    let mut shape = t.dims().to_vec();
    shape[dim] = len.div_ceil(2);
    shape.insert(dim + 1, 2);
    Ok(t.pad_with_zeros(dim, 0, 2 * len.div_ceil(2) - len)?
        .reshape(shape)?
        .narrow(dim + 1, 0, 1)?
        .squeeze(dim + 1)?)
}

/// 3x3 max-pool with stride 2 built from `maximum` over shifted views.
/// candle's own pooling backward refuses kernel != stride.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < 3 || w < 3 {
        return Err(DeltError::Shape(format!("max-pool input {h}x{w} is smaller than the window")));
    }
    let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let v = x.narrow(2, dy, 2 * oh - 1)?.narrow(3, dx, 2 * ow - 1)?;
            let v = every_other(&every_other(&v, 2)?, 3)?;
            out = Some(match out {
                Some(m) => m.maximum(&v)?,
                None => v,
            });
        }
    }
    Ok(out.expect("nine taps"))
}

fn relu6(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(0.0, 6.0)?)
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

fn basic_block(ctx: &mut Ctx, x: &Tensor, name: &str, out: usize, stride: usize) -> Result<Tensor> {
    let cin = x.dim(1)?;
    let h = ctx.conv(x, &format!("{name}.conv1"), out, 3, stride, 1, 1, false)?;
    let h = ctx.batch_norm(&h, &format!("{name}.bn1"))?.relu()?;
    let h = ctx.conv(&h, &format!("{name}.conv2"), out, 3, 1, 1, 1, false)?;
    let h = ctx.batch_norm(&h, &format!("{name}.bn2"))?;
    let shortcut = if stride != 1 || cin != out {
        let s = ctx.conv(x, &format!("{name}.downsample.0"), out, 1, stride, 0, 1, false)?;
        ctx.batch_norm(&s, &format!("{name}.downsample.1"))?
    } else {
        x.clone()
    };
    Ok((h + shortcut)?.relu()?)
}

fn bottleneck(ctx: &mut Ctx, x: &Tensor, name: &str, planes: usize, stride: usize) -> Result<Tensor> {
    let cin = x.dim(1)?;
    let out = planes * 4;
    let h = ctx.conv(x, &format!("{name}.conv1"), planes, 1, 1, 0, 1, false)?;
    let h = ctx.batch_norm(&h, &format!("{name}.bn1"))?.relu()?;
    let h = ctx.conv(&h, &format!("{name}.conv2"), planes, 3, stride, 1, 1, false)?;
    let h = ctx.batch_norm(&h, &format!("{name}.bn2"))?.relu()?;
    let h = ctx.conv(&h, &format!("{name}.conv3"), out, 1, 1, 0, 1, false)?;
    let h = ctx.batch_norm(&h, &format!("{name}.bn3"))?;
    let shortcut = if stride != 1 || cin != out {
        let s = ctx.conv(x, &format!("{name}.downsample.0"), out, 1, stride, 0, 1, false)?;
        ctx.batch_norm(&s, &format!("{name}.downsample.1"))?
    } else {
        x.clone()
    };
    Ok((h + shortcut)?.relu()?)
}

fn resnet_stem(ctx: &mut Ctx, spec: &NetSpec, x: &Tensor) -> Result<Tensor> {
    if spec.resolution <= 64 {
        // small-resolution variant: 3x3 stem, no max-pool
        let h = ctx.conv(x, "conv1", spec.width, 3, 1, 1, 1, false)?;
        Ok(ctx.batch_norm(&h, "bn1")?.relu()?)
    } else {
        let h = ctx.conv(x, "conv1", spec.width, 7, 2, 3, 1, false)?;
        let h = ctx.batch_norm(&h, "bn1")?.relu()?;
        // post-ReLU values are >= 0, so zero padding is neutral for max-pool
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        max_pool_3x3_s2(&h)
    }
}

fn resnet(ctx: &mut Ctx, spec: &NetSpec, x: &Tensor, blocks: [usize; 4], bottle: bool) -> Result<(Tensor, Tensor)> {
    let mut h = resnet_stem(ctx, spec, x)?;
    for (stage, &count) in blocks.iter().enumerate() {
        let planes = spec.width << stage;
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{i}", stage + 1);
            h = if bottle {
                bottleneck(ctx, &h, &name, planes, stride)?
            } else {
                basic_block(ctx, &h, &name, planes, stride)?
            };
        }
    }
    let features = global_avg_pool(&h)?;
    let logits = ctx.linear(&features, "fc", spec.num_classes)?;
    Ok((logits, features))
}

fn convnet(ctx: &mut Ctx, spec: &NetSpec, x: &Tensor, depth: usize, norm: bool) -> Result<(Tensor, Tensor)> {
    let mut h = x.clone();
    for i in 0..depth {
        h = ctx.conv(&h, &format!("features.{i}.conv"), spec.width, 3, 1, 1, 1, true)?;
        if norm {
            h = ctx.batch_norm(&h, &format!("features.{i}.norm"))?;
        }
        h = h.relu()?.avg_pool2d(2)?;
    }
    let features = h.flatten_from(1)?;
    let logits = ctx.linear(&features, "classifier", spec.num_classes)?;
    Ok((logits, features))
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new = ((v + d / 2.0) / d).floor() as usize * divisor;
    new = new.max(divisor);
    if (new as f64) < 0.9 * v {
        new += divisor;
    }
    new
}

fn mobilenet_v2(ctx: &mut Ctx, spec: &NetSpec, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let alpha = spec.width as f64 / 32.0;
    let small = spec.resolution <= 64;
    // (expansion, channels, repeats, stride)
    let settings: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, if small { 1 } else { 2 }),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let stem = make_divisible(32.0 * alpha, 8);
    let last = make_divisible(1280.0 * alpha.max(1.0), 8);
    let mut h = ctx.conv(x, "features.0.conv", stem, 3, if small { 1 } else { 2 }, 1, 1, false)?;
    h = relu6(&ctx.batch_norm(&h, "features.0.bn")?)?;
    let mut idx = 1;
    for (t, c, n, s) in settings {
        let out = make_divisible(c as f64 * alpha, 8);
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let cin = h.dim(1)?;
            let hidden = cin * t;
            let name = format!("features.{idx}");
            let mut y = h.clone();
            if t != 1 {
                y = ctx.conv(&y, &format!("{name}.expand"), hidden, 1, 1, 0, 1, false)?;
                y = relu6(&ctx.batch_norm(&y, &format!("{name}.expand_bn"))?)?;
            }
            y = ctx.conv(&y, &format!("{name}.dw"), hidden, 3, stride, 1, hidden, false)?;
            y = relu6(&ctx.batch_norm(&y, &format!("{name}.dw_bn"))?)?;
            y = ctx.conv(&y, &format!("{name}.project"), out, 1, 1, 0, 1, false)?;
            y = ctx.batch_norm(&y, &format!("{name}.project_bn"))?;
            h = if stride == 1 && cin == out { (y + &h)? } else { y };
            idx += 1;
        }
    }
    h = ctx.conv(&h, &format!("features.{idx}.conv"), last, 1, 1, 0, 1, false)?;
    h = relu6(&ctx.batch_norm(&h, &format!("features.{idx}.bn"))?)?;
    let features = global_avg_pool(&h)?;
    let logits = ctx.linear(&features, "classifier", spec.num_classes)?;
    Ok((logits, features))
}

fn run(ctx: &mut Ctx, spec: &NetSpec, x: &Tensor) -> Result<(Tensor, Tensor)> {
    match spec.arch {
        Architecture::ResNet18 => resnet(ctx, spec, x, [2, 2, 2, 2], false),
        Architecture::ResNet101 => resnet(ctx, spec, x, [3, 4, 23, 3], true),
        Architecture::ConvNet { depth } => convnet(ctx, spec, x, depth, true),
        Architecture::PlainConvNet { depth } => convnet(ctx, spec, x, depth, false),
        Architecture::MobileNetV2Small => mobilenet_v2(ctx, spec, x),
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// A classifier: architecture spec plus named parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetSpec,
    params: BTreeMap<String, Tensor>,
    bn_layers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: NetSpec,
    bn_layers: Vec<String>,
}

impl Network {
    /// Builds a freshly initialized network; identical seeds give identical weights.
    pub fn init(spec: NetSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut map = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Tensor::zeros(
            (2, spec.in_channels, spec.resolution, spec.resolution),
            dtype,
            device,
        )?;
        let mut ctx = Ctx {
            params: Params::Build {
                map: &mut map,
                rng: &mut rng,
                dtype,
                device,
            },
            mode: BnMode::Eval,
            capture: false,
            stats: Vec::new(),
            updates: Vec::new(),
            bn_names: Vec::new(),
        };
        run(&mut ctx, &spec, &probe)?;
        let bn_layers = ctx.bn_names;
        Ok(Self {
            spec,
            params: map,
            bn_layers,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        self.params.values().next().expect("network has parameters").device()
    }

    pub fn dtype(&self) -> DType {
        self.params.values().next().expect("network has parameters").dtype()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn_layers.len()
    }

    pub fn bn_layer_names(&self) -> &[String] {
        &self.bn_layers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self
            .params
            .get(name)
            .ok_or_else(|| DeltError::Shape(format!("unknown parameter `{name}`")))?;
        if old.dims() != value.dims() {
            return Err(DeltError::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                old.dims(),
                value.dims()
            )));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Running statistics of every BN layer in forward order.
    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.bn_layers
            .iter()
            .map(|n| RunningStats {
                mean: self.params[&format!("{n}.running_mean")].clone(),
                var: self.params[&format!("{n}.running_var")].clone(),
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels || h != self.spec.resolution || w != self.spec.resolution {
            return Err(DeltError::Shape(format!(
                "input {:?} does not match {}x{}x{}",
                x.dims(),
                self.spec.in_channels,
                self.spec.resolution,
                self.spec.resolution
            )));
        }
        Ok(())
    }

    /// Inference-mode forward; BN normalizes with running statistics.
    ///
    /// With `capture`, the per-channel mean and biased variance of each BN
    /// layer's input are returned as well (requires a batch of at least 2).
    pub fn forward(&self, x: &Tensor, capture: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            params: Params::Read(&self.params),
            mode: BnMode::Eval,
            capture,
            stats: Vec::new(),
            updates: Vec::new(),
            bn_names: Vec::new(),
        };
        let (logits, features) = run(&mut ctx, &self.spec, x)?;
        Ok(ForwardOutput {
            logits,
            features,
            bn_stats: ctx.stats,
        })
    }

    /// Training-mode forward; BN normalizes with batch statistics.
    pub fn forward_train(&self, x: &Tensor) -> Result<(ForwardOutput, Vec<RunningUpdate>)> {
        self.check_input(x)?;
        let mut ctx = Ctx {
            params: Params::Read(&self.params),
            mode: BnMode::Train,
            capture: false,
            stats: Vec::new(),
            updates: Vec::new(),
            bn_names: Vec::new(),
        };
        let (logits, features) = run(&mut ctx, &self.spec, x)?;
        Ok((
            ForwardOutput {
                logits,
                features,
                bn_stats: Vec::new(),
            },
            ctx.updates,
        ))
    }

    pub fn apply_running_updates(&mut self, updates: Vec<RunningUpdate>) {
        for u in updates {
            self.params.insert(format!("{}.running_mean", u.name), u.mean);
            self.params.insert(format!("{}.running_var", u.name), u.var);
        }
    }

    /// Wraps every trainable parameter in a [`Var`]; the network then reads
    /// through the vars, so optimizer steps are visible to `forward`.
    pub fn make_trainable(&mut self) -> Result<Vec<Var>> {
        let mut vars = Vec::new();
        let names: Vec<String> = self.params.keys().filter(|n| !is_buffer(n)).cloned().collect();
        for name in names {
            let var = Var::from_tensor(&self.params[&name])?;
            self.params.insert(name, var.as_tensor().clone());
            vars.push(var);
        }
        Ok(vars)
    }

    /// Returns an independent copy with no gradient tracking.
    pub fn frozen(&self) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.detach().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: self.spec.clone(),
            params,
            bn_layers: self.bn_layers.clone(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: self.spec.clone(),
            params,
            bn_layers: self.bn_layers.clone(),
        })
    }

    /// Bit-level fingerprint of all parameters (including BN buffers).
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `<path>` (safetensors) and `<path>.json` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tensors: std::collections::HashMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        candle_core::safetensors::save(&tensors, path)?;
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            bn_layers: self.bn_layers.clone(),
        };
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let loaded = candle_core::safetensors::load(path, device)?;
        let reference = Self::init(meta.spec.clone(), 0, DType::F32, device)?;
        let expected: BTreeSet<&String> = reference.params.keys().collect();
        let found: BTreeSet<&String> = loaded.keys().collect();
        if expected != found {
            return Err(DeltError::Integrity(format!(
                "checkpoint {} does not match architecture {}",
                path.display(),
                meta.spec.arch
            )));
        }
        Ok(Self {
            spec: meta.spec,
            params: loaded.into_iter().collect(),
            bn_layers: meta.bn_layers,
        })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
