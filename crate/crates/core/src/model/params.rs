use std::collections::HashMap;

use rand::Rng as _;

use super::{ArchConfig, ModelError};
use crate::autograd::BnObservation;
use crate::data::Modality;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

/// Named sub-networks. The name is the prefix of every tensor they own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubNetwork {
    E1,
    E2,
    G1,
    G2,
    D1,
    D2,
    S,
}

impl SubNetwork {
    pub const ALL: [SubNetwork; 7] = [Self::E1, Self::E2, Self::G1, Self::G2, Self::D1, Self::D2, Self::S];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::E1 => "e1",
            Self::E2 => "e2",
            Self::G1 => "g1",
            Self::G2 => "g2",
            Self::D1 => "d1",
            Self::D2 => "d2",
            Self::S => "s",
        }
    }

    pub fn encoder(m: Modality) -> Self {
        match m {
            Modality::M1 => Self::E1,
            Modality::M2 => Self::E2,
        }
    }

    pub fn decoder(m: Modality) -> Self {
        match m {
            Modality::M1 => Self::G1,
            Modality::M2 => Self::G2,
        }
    }

    pub fn discriminator(m: Modality) -> Self {
        match m {
            Modality::M1 => Self::D1,
            Modality::M2 => Self::D2,
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Self::D1 | Self::D2)
    }

    /// The sub-network owning a tensor name.
    pub fn of(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Self::ALL.into_iter().find(|s| s.prefix() == prefix)
    }
}

type Visitor<'a> = dyn FnMut(&str, &Tensor, ParamKind) + 'a;
type VisitorMut<'a> = dyn FnMut(&str, &mut Tensor, ParamKind) + 'a;

/// Enumerates owned tensors under stable dotted names.
pub(crate) trait Visit {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>);
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[out, in, k]`, or `[out, 2, in]` for the transposed upsampling layers.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn new(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (cin * k) as f64).sqrt();
        Self { weight: uniform(&[cout, cin, k], bound, rng), bias: Tensor::zeros(&[cout]) }
    }

    fn transposed(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / cin as f64).sqrt();
        Self { weight: uniform(&[cout, 2, cin], bound, rng), bias: Tensor::zeros(&[cout]) }
    }
}

impl Visit for Conv {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        f(&format!("{p}.weight"), &self.weight, ParamKind::Trainable);
        f(&format!("{p}.bias"), &self.bias, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        f(&format!("{p}.weight"), &mut self.weight, ParamKind::Trainable);
        f(&format!("{p}.bias"), &mut self.bias, ParamKind::Trainable);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
        }
    }
}

impl Visit for BatchNorm {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        f(&format!("{p}.gamma"), &self.gamma, ParamKind::Trainable);
        f(&format!("{p}.beta"), &self.beta, ParamKind::Trainable);
        f(&format!("{p}.running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&format!("{p}.running_var"), &self.running_var, ParamKind::Buffer);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        f(&format!("{p}.gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&format!("{p}.beta"), &mut self.beta, ParamKind::Trainable);
        f(&format!("{p}.running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&format!("{p}.running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        Self { conv: Conv::new(cin, cout, k, rng), bn: BatchNorm::new(cout) }
    }
}

impl Visit for ConvBnRelu {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&format!("{p}.conv"), f);
        self.bn.visit(&format!("{p}.bn"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        self.conv.visit_mut(&format!("{p}.conv"), f);
        self.bn.visit_mut(&format!("{p}.bn"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new(din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self { weight: uniform(&[dout, din], bound, rng), bias: uniform(&[dout], bound, rng) }
    }
}

impl Visit for Linear {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        f(&format!("{p}.weight"), &self.weight, ParamKind::Trainable);
        f(&format!("{p}.bias"), &self.bias, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        f(&format!("{p}.weight"), &mut self.weight, ParamKind::Trainable);
        f(&format!("{p}.bias"), &mut self.bias, ParamKind::Trainable);
    }
}

/// Two conv-BN-ReLU layers followed by max-pooling.
pub type ConvBlock = [ConvBnRelu; 2];

fn conv_block(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> ConvBlock {
    [ConvBnRelu::new(cin, cout, k, rng), ConvBnRelu::new(cout, cout, k, rng)]
}

fn visit_blocks(blocks: &[ConvBlock], p: &str, f: &mut Visitor<'_>) {
    for (i, b) in blocks.iter().enumerate() {
        b[0].visit(&format!("{p}.block{i}.0"), f);
        b[1].visit(&format!("{p}.block{i}.1"), f);
    }
}

fn visit_blocks_mut(blocks: &mut [ConvBlock], p: &str, f: &mut VisitorMut<'_>) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b[0].visit_mut(&format!("{p}.block{i}.0"), f);
        b[1].visit_mut(&format!("{p}.block{i}.1"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
    /// Produces the bottleneck feature map.
    pub head: ConvBnRelu,
}

impl Encoder {
    fn new(cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let k = cfg.kernel_size;
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| {
                let cin = if i == 0 { 1 } else { cfg.block_channels(i - 1) };
                conv_block(cin, cfg.block_channels(i), k, rng)
            })
            .collect();
        let head = ConvBnRelu::new(cfg.block_channels(cfg.encoder_blocks - 1), cfg.bottleneck_channels(), k, rng);
        Self { blocks, head }
    }
}

impl Visit for Encoder {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        visit_blocks(&self.blocks, p, f);
        self.head.visit(&format!("{p}.head"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        visit_blocks_mut(&mut self.blocks, p, f);
        self.head.visit_mut(&format!("{p}.head"), f);
    }
}

/// Upsampling stages ordered from the bottleneck outwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub up: Vec<Conv>,
    pub fuse: Vec<ConvBnRelu>,
    /// 1×1 output convolution.
    pub out: Conv,
}

impl Decoder {
    fn new(cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let b = cfg.encoder_blocks;
        let mut up = Vec::with_capacity(b);
        let mut fuse = Vec::with_capacity(b);
        for i in 0..b {
            let level = b - 1 - i;
            let c = cfg.block_channels(level);
            let cin = if i == 0 { cfg.bottleneck_channels() } else { cfg.block_channels(level + 1) };
            up.push(Conv::transposed(cin, c, rng));
            fuse.push(ConvBnRelu::new(2 * c, c, cfg.kernel_size, rng));
        }
        let out = Conv::new(cfg.base_channels, 1, 1, rng);
        Self { up, fuse, out }
    }
}

impl Visit for Decoder {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        for (i, (u, c)) in self.up.iter().zip(&self.fuse).enumerate() {
            u.visit(&format!("{p}.up{i}"), f);
            c.visit(&format!("{p}.fuse{i}"), f);
        }
        self.out.visit(&format!("{p}.out"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        for (i, (u, c)) in self.up.iter_mut().zip(&mut self.fuse).enumerate() {
            u.visit_mut(&format!("{p}.up{i}"), f);
            c.visit_mut(&format!("{p}.fuse{i}"), f);
        }
        self.out.visit_mut(&format!("{p}.out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub blocks: Vec<ConvBlock>,
    /// Two logits: index 0 "generated", index 1 "real".
    pub fc: Linear,
}

impl Discriminator {
    fn new(cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let k = cfg.kernel_size;
        let blocks = (0..cfg.disc_blocks)
            .map(|i| {
                let cin = if i == 0 { 1 } else { cfg.block_channels(i - 1) };
                conv_block(cin, cfg.block_channels(i), k, rng)
            })
            .collect();
        let features = cfg.block_channels(cfg.disc_blocks - 1) * (cfg.input_length >> cfg.disc_blocks);
        Self { blocks, fc: Linear::new(features, 2, rng) }
    }
}

impl Visit for Discriminator {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        visit_blocks(&self.blocks, p, f);
        self.fc.visit(&format!("{p}.fc"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        visit_blocks_mut(&mut self.blocks, p, f);
        self.fc.visit_mut(&format!("{p}.fc"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Siamese {
    pub blocks: Vec<ConvBlock>,
    pub fc: Linear,
}

impl Siamese {
    fn new(cfg: &ArchConfig, rng: &mut Rng) -> Self {
        let k = cfg.kernel_size;
        let chans = &cfg.siamese_channels;
        let blocks = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cin = if i == 0 { cfg.siamese_input_channels() } else { chans[i - 1] };
                conv_block(cin, c, k, rng)
            })
            .collect();
        let features = chans[chans.len() - 1] * (cfg.siamese_input_length >> chans.len());
        Self { blocks, fc: Linear::new(features, cfg.embedding_dim, rng) }
    }
}

impl Visit for Siamese {
    fn visit(&self, p: &str, f: &mut Visitor<'_>) {
        visit_blocks(&self.blocks, p, f);
        self.fc.visit(&format!("{p}.fc"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitorMut<'_>) {
        visit_blocks_mut(&mut self.blocks, p, f);
        self.fc.visit_mut(&format!("{p}.fc"), f);
    }
}

/// All trainable weights and batch-norm statistics of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ArchConfig,
    pub e1: Encoder,
    pub e2: Encoder,
    pub g1: Decoder,
    pub g2: Decoder,
    pub d1: Discriminator,
    pub d2: Discriminator,
    pub s: Siamese,
}

/// The encoders and the Siamese network only: what matching needs.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceParams {
    pub config: ArchConfig,
    pub e1: Encoder,
    pub e2: Encoder,
    pub s: Siamese,
}

impl ModelParams {
    /// Random initialization, deterministic per `seed`. Convolutions use
    /// fan-in scaled uniform weights and zero bias; batch-norm starts at scale 1, shift 0.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let r = |net: SubNetwork| rng::stream(seed, "init", net as u64);
        Ok(Self {
            e1: Encoder::new(config, &mut r(SubNetwork::E1)),
            e2: Encoder::new(config, &mut r(SubNetwork::E2)),
            g1: Decoder::new(config, &mut r(SubNetwork::G1)),
            g2: Decoder::new(config, &mut r(SubNetwork::G2)),
            d1: Discriminator::new(config, &mut r(SubNetwork::D1)),
            d2: Discriminator::new(config, &mut r(SubNetwork::D2)),
            s: Siamese::new(config, &mut r(SubNetwork::S)),
            config: config.clone(),
        })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::M1 => &self.e1,
            Modality::M2 => &self.e2,
        }
    }

    pub fn decoder(&self, m: Modality) -> &Decoder {
        match m {
            Modality::M1 => &self.g1,
            Modality::M2 => &self.g2,
        }
    }

    pub fn discriminator(&self, m: Modality) -> &Discriminator {
        match m {
            Modality::M1 => &self.d1,
            Modality::M2 => &self.d2,
        }
    }

    /// Visits every tensor as `(name, tensor, kind)` in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor, ParamKind)) {
        self.e1.visit("e1", &mut f);
        self.e2.visit("e2", &mut f);
        self.g1.visit("g1", &mut f);
        self.g2.visit("g2", &mut f);
        self.d1.visit("d1", &mut f);
        self.d2.visit("d2", &mut f);
        self.s.visit("s", &mut f);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, ParamKind)) {
        self.e1.visit_mut("e1", &mut f);
        self.e2.visit_mut("e2", &mut f);
        self.g1.visit_mut("g1", &mut f);
        self.g2.visit_mut("g2", &mut f);
        self.d1.visit_mut("d1", &mut f);
        self.d2.visit_mut("d2", &mut f);
        self.s.visit_mut("s", &mut f);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, t, _| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t, _| ok &= t.is_finite());
        ok
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t, k| {
            if k == ParamKind::Trainable {
                n += t.len()
            }
        });
        n
    }

    /// Rebuilds parameters from named tensors, checking every shape against `config`.
    pub fn from_named(config: &ArchConfig, tensors: &[(String, Tensor)]) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        fill_from_named(tensors, p.named_tensors().len(), |f| p.for_each_mut(f))?;
        Ok(p)
    }

    /// Folds observed batch statistics into the running averages, in order,
    /// for the batch-norm layers of sub-networks accepted by `include`.
    pub fn apply_bn_observations(
        &mut self,
        observations: &[BnObservation],
        momentum: f64,
        include: impl Fn(SubNetwork) -> bool,
    ) {
        let mut by_layer: HashMap<&str, Vec<&BnObservation>> = HashMap::new();
        for o in observations {
            if SubNetwork::of(&o.name).is_some_and(&include) {
                by_layer.entry(o.name.as_str()).or_default().push(o);
            }
        }
        self.for_each_mut(|name, t, kind| {
            if kind != ParamKind::Buffer {
                return;
            }
            let (layer, field) = name.rsplit_once('.').expect("dotted buffer name");
            for o in by_layer.get(layer).into_iter().flatten() {
                let src = if field == "running_mean" { &o.mean } else { &o.var };
                for (r, &v) in t.data_mut().iter_mut().zip(src) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        });
    }

    /// Drops the decoders and discriminators.
    pub fn strip_for_inference(&self) -> InferenceParams {
        InferenceParams { config: self.config.clone(), e1: self.e1.clone(), e2: self.e2.clone(), s: self.s.clone() }
    }
}

impl InferenceParams {
    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::M1 => &self.e1,
            Modality::M2 => &self.e2,
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor, ParamKind)) {
        self.e1.visit("e1", &mut f);
        self.e2.visit("e2", &mut f);
        self.s.visit("s", &mut f);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, ParamKind)) {
        self.e1.visit_mut("e1", &mut f);
        self.e2.visit_mut("e2", &mut f);
        self.s.visit_mut("s", &mut f);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, t, _| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn from_named(config: &ArchConfig, tensors: &[(String, Tensor)]) -> Result<Self, ModelError> {
        let mut p = ModelParams::init(config, 0)?.strip_for_inference();
        fill_from_named(tensors, p.named_tensors().len(), |f| p.for_each_mut(f))?;
        Ok(p)
    }
}

fn fill_from_named(
    tensors: &[(String, Tensor)],
    expected: usize,
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor, ParamKind)),
) -> Result<(), ModelError> {
    if tensors.len() != expected {
        return Err(ModelError::Checkpoint(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err = None;
    visit(&mut |name, slot, _| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            Some(t) if t.shape() == slot.shape() => *slot = (*t).clone(),
            Some(t) => {
                err = Some(ModelError::ShapeMismatch {
                    expected: format!("{name} {:?}", slot.shape()),
                    found: format!("{:?}", t.shape()),
                })
            }
            None => err = Some(ModelError::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}
