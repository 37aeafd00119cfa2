//! The tiny differentiable classifier used as teacher and student.
//!
//! Two architectures share one parameter layout convention: a flat `f64`
//! vector partitioned into named blocks. `convnet` is two 3×3 stride-2
//! convolutions followed by a dense layer; `mlp` is a stack of dense layers
//! over the flattened image. Inputs are normalized by subtracting a
//! per-channel mean stored in the architecture, so masking a region with
//! that mean is the same as zeroing it in normalized space.

mod checkpoint;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub use net::{log_softmax, softmax, ForwardCache, ForwardResult};
pub use train::{
    soft_label, soft_label_with_temperature, train_sgd, BatchReduction, CropAugment, Example, Label, SoftLabel,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    /// conv(3×3, stride 2) → act → conv(3×3, stride 2) → act → dense
    ConvNet,
    /// dense → act → … → dense over the flattened input
    Mlp,
}

/// Complete description of a network's shapes and input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Conv output channels (exactly two) or hidden layer widths.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    /// Per-channel mean subtracted from inputs.
    pub input_mean: Vec<f64>,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// `ceil(n / 2)`: output extent of a 3×3 convolution with stride 2, padding 1.
pub(crate) fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

impl ArchSpec {
    pub fn convnet(
        height: usize,
        width: usize,
        channels: usize,
        conv_channels: [usize; 2],
        classes: usize,
    ) -> Self {
        Self {
            kind: ArchKind::ConvNet,
            height,
            width,
            channels,
            hidden: conv_channels.to_vec(),
            classes,
            activation: Activation::Relu,
            input_mean: vec![0.0; channels],
        }
    }

    pub fn mlp(height: usize, width: usize, channels: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            height,
            width,
            channels,
            hidden: hidden.to_vec(),
            classes,
            activation: Activation::Relu,
            input_mean: vec![0.0; channels],
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_input_mean(mut self, mean: Vec<f64>) -> Self {
        self.input_mean = mean;
        self
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("input extents must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_mean.len() != self.channels {
            return Err(Error::DimensionMismatch {
                what: "input mean length",
                expected: self.channels,
                got: self.input_mean.len(),
            });
        }
        if self.input_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("input mean"));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.kind == ArchKind::ConvNet && self.hidden.len() != 2 {
            return bad(format!(
                "convnet needs exactly two conv widths, got {}",
                self.hidden.len()
            ));
        }
        Ok(())
    }

    /// Parameter blocks in storage order.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        match self.kind {
            ArchKind::ConvNet => {
                let (c1, c2) = (self.hidden[0], self.hidden[1]);
                let (h2, w2) = (conv_out(conv_out(self.height)), conv_out(conv_out(self.width)));
                shapes.push(("conv1.weight".into(), vec![3, 3, self.channels, c1]));
                shapes.push(("conv1.bias".into(), vec![c1]));
                shapes.push(("conv2.weight".into(), vec![3, 3, c1, c2]));
                shapes.push(("conv2.bias".into(), vec![c2]));
                shapes.push(("dense.weight".into(), vec![self.classes, h2 * w2 * c2]));
                shapes.push(("dense.bias".into(), vec![self.classes]));
            }
            ArchKind::Mlp => {
                let mut fan_in = self.input_len();
                let widths = self.hidden.iter().copied().chain([self.classes]);
                for (i, out) in widths.enumerate() {
                    shapes.push((format!("fc{i}.weight"), vec![out, fan_in]));
                    shapes.push((format!("fc{i}.bias"), vec![out]));
                    fan_in = out;
                }
            }
        }
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let block = ParamBlock {
                    name,
                    shape,
                    offset,
                    len,
                };
                offset += len;
                block
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len).sum()
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for ArchSpec {
    /// One-line form stored in checkpoint headers; floats use the shortest
    /// round-trip representation so parsing is bit-exact.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ArchKind::ConvNet => "convnet",
            ArchKind::Mlp => "mlp",
        };
        write!(
            f,
            "{kind} h={} w={} c={} hidden={} classes={} act={} mean={}",
            self.height,
            self.width,
            self.channels,
            join(&self.hidden),
            self.classes,
            self.activation.name(),
            self.input_mean
                .iter()
                .map(|m| format!("{m:?}"))
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("arch spec `{s}`: {m}"));
        let mut parts = s.split_whitespace();
        let kind = match parts.next() {
            Some("convnet") => ArchKind::ConvNet,
            Some("mlp") => ArchKind::Mlp,
            _ => return Err(bad("unknown architecture")),
        };
        let mut spec = ArchSpec {
            kind,
            height: 0,
            width: 0,
            channels: 0,
            hidden: Vec::new(),
            classes: 0,
            activation: Activation::Relu,
            input_mean: Vec::new(),
        };
        let list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| bad("bad integer list")))
                .collect()
        };
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let int = || value.parse::<usize>().map_err(|_| bad("bad integer"));
            match key {
                "h" => spec.height = int()?,
                "w" => spec.width = int()?,
                "c" => spec.channels = int()?,
                "classes" => spec.classes = int()?,
                "hidden" => spec.hidden = list(value)?,
                "act" => {
                    spec.activation = match value {
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        _ => return Err(bad("unknown activation")),
                    }
                }
                "mean" => {
                    spec.input_mean = value
                        .split(',')
                        .map(|x| x.parse::<f64>().map_err(|_| bad("bad float")))
                        .collect::<Result<_>>()?
                }
                _ => return Err(bad("unknown key")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters `θ^(t)` of a network at a given epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    pub epoch: usize,
    pub init_seed: u64,
}

impl ModelCheckpoint {
    /// Seeded He-style uniform initialization: weights in
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: ArchSpec, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(init_seed);
        let mut params = vec![0.0; arch.param_count()];
        for block in arch.blocks() {
            if block.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = match arch.kind {
                ArchKind::ConvNet if block.name.starts_with("conv") => {
                    block.shape[0] * block.shape[1] * block.shape[2]
                }
                _ => block.shape[1],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[block.offset..block.offset + block.len] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            arch,
            params,
            epoch: 0,
            init_seed,
        })
    }

    /// All parameters zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.param_count()];
        Ok(Self {
            arch,
            params,
            epoch: 0,
            init_seed: 0,
        })
    }

    pub fn from_params(arch: ArchSpec, params: Vec<f64>, epoch: usize, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        crate::error::ensure_finite(&params, || "model parameters".into())?;
        Ok(Self {
            arch,
            params,
            epoch,
            init_seed,
        })
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        self.arch.blocks()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks()
            .into_iter()
            .find(|b| b.name == name)
            .map(|b| &self.params[b.offset..b.offset + b.len])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let b = self.blocks().into_iter().find(|b| b.name == name)?;
        Some(&mut self.params[b.offset..b.offset + b.len])
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Resizes `image` to the input extents when needed.
    pub fn fit_input(&self, image: &Image) -> Result<Image> {
        if image.channels() != self.arch.channels {
            return Err(Error::DimensionMismatch {
                what: "input channels",
                expected: self.arch.channels,
                got: image.channels(),
            });
        }
        image.resize_bilinear(self.arch.height, self.arch.width)
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn predict(&self, image: &Image) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
