//! Encoder, decoder and ordinal regressor sharing one latent space.
//!
//! The encoder maps an `n×n` image to a diagonal Gaussian `q(z|x)` through a
//! stack of stride-2 residual blocks and an affine head that emits the mean
//! and the log-variance side by side. The decoder mirrors it with transposed
//! convolutions. The regressor only ever sees `z`: the label depends on the
//! image through the latent code alone.
//!
//! All layer widths equal `base_channels`; block counts and the spatial view
//! of the latent are configurable so full-size shapes stay expressible.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{ConvGeometry, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("severity class {0} outside 0..=3")]
    InvalidClass(u8),
    #[error("ordinal bits {0:?} are not monotone")]
    NonMonotoneLabel([u8; 3]),
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Number of ordinal bits (four severity classes).
pub const ORDINAL_BITS: usize = 3;

pub const ENCODER_HEAD: &str = "enc.head";
pub const DECODER_OUTPUT_PREFIX: &str = "dec.up";
pub const REGRESSOR_OUTPUT: &str = "reg.fc2";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    /// Side length `n` of the square input image.
    pub image_side: usize,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// Spatial view `(channels, height, width)` of the latent used by the regressor.
    pub latent_shape: [usize; 3],
    /// Stride-2 residual blocks in the encoder (and transposed blocks in the decoder).
    pub blocks: usize,
    pub base_channels: usize,
    /// Stride-1 residual blocks in the regressor.
    pub regressor_blocks: usize,
    pub regressor_hidden: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            image_side: 64,
            latent_dim: 32,
            latent_shape: [32, 1, 1],
            blocks: 3,
            base_channels: 16,
            regressor_blocks: 2,
            regressor_hidden: 16,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        if self.image_side == 0 || self.latent_dim == 0 || self.base_channels == 0 || self.regressor_hidden == 0 {
            return bad("sizes must be positive".into());
        }
        if self.blocks == 0 {
            return bad("at least one encoder block is required".into());
        }
        let factor = 1usize << self.blocks;
        if self.image_side % factor != 0 {
            return bad(format!(
                "image side {} is not divisible by 2^{}",
                self.image_side, self.blocks
            ));
        }
        let [c, h, w] = self.latent_shape;
        if c * h * w != self.latent_dim {
            return bad(format!(
                "latent shape {:?} does not hold {} values",
                self.latent_shape, self.latent_dim
            ));
        }
        if h != w || h == 0 {
            return bad(format!("latent shape {:?} must be square and nonempty", self.latent_shape));
        }
        Ok(())
    }

    /// Spatial side of the deepest encoder feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.image_side >> self.blocks
    }

    fn regressor_kernel(&self) -> usize {
        if self.latent_shape[1] >= 3 {
            3
        } else {
            1
        }
    }

    /// `key = value` lines describing this architecture.
    pub fn descriptor(&self) -> String {
        let [c, h, w] = self.latent_shape;
        format!(
            "image_side = {}\nlatent_dim = {}\nlatent_shape = {c}x{h}x{w}\nblocks = {}\nbase_channels = {}\nregressor_blocks = {}\nregressor_hidden = {}\n",
            self.image_side,
            self.latent_dim,
            self.blocks,
            self.base_channels,
            self.regressor_blocks,
            self.regressor_hidden
        )
    }

    /// Inverse of [`Arch::descriptor`]; unlisted keys keep their defaults.
    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut arch = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidArch(format!("malformed descriptor line `{line}`")))?;
            match arch.set(k.trim(), v.trim()) {
                Ok(true) => {}
                Ok(false) => return Err(ModelError::InvalidArch(format!("unknown key `{}`", k.trim()))),
                Err(e) => return Err(ModelError::InvalidArch(e)),
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    /// Applies one `key = value` setting; returns `Ok(false)` for keys that are not architecture keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let parse = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "image_side" => self.image_side = parse(value)?,
            "latent_dim" => self.latent_dim = parse(value)?,
            "latent_shape" => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("{key}: {e}"))?;
                let [c, h, w] = dims[..] else {
                    return Err(format!("{key}: expected CxHxW, got `{value}`"));
                };
                self.latent_shape = [c, h, w];
            }
            "blocks" => self.blocks = parse(value)?,
            "base_channels" => self.base_channels = parse(value)?,
            "regressor_blocks" => self.regressor_blocks = parse(value)?,
            "regressor_hidden" => self.regressor_hidden = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parameter names, shapes and fan-in used for initialization, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let s = self.bottleneck_side();
        let mut specs = Vec::new();
        let mut conv = |name: String, out: usize, inp: usize, k: usize| {
            specs.push(ParamSpec::new(format!("{name}.w"), vec![out, inp, k, k], inp * k * k));
            specs.push(ParamSpec::new(format!("{name}.b"), vec![out], 0));
        };
        for i in 0..self.blocks {
            let c_in = if i == 0 { 1 } else { c };
            conv(format!("enc.block{i}.conv_a"), c, c_in, 3);
            conv(format!("enc.block{i}.conv_b"), c, c, 3);
            conv(format!("enc.block{i}.skip"), c, c_in, 1);
        }
        let kr = self.regressor_kernel();
        conv("reg.stem".into(), c, self.latent_shape[0], kr);
        for i in 0..self.regressor_blocks {
            conv(format!("reg.block{i}.conv_a"), c, c, kr);
            conv(format!("reg.block{i}.conv_b"), c, c, kr);
        }
        let flat = c * s * s;
        let mut affine = |name: &str, out: usize, inp: usize| {
            specs.push(ParamSpec::new(format!("{name}.w"), vec![out, inp], inp));
            specs.push(ParamSpec::new(format!("{name}.b"), vec![out], 0));
        };
        affine(ENCODER_HEAD, 2 * self.latent_dim, flat);
        affine("dec.stem", flat, self.latent_dim);
        affine("reg.fc1", self.regressor_hidden, c);
        affine(REGRESSOR_OUTPUT, ORDINAL_BITS, self.regressor_hidden);
        for i in 0..self.blocks {
            let c_out = if i + 1 == self.blocks { 1 } else { c };
            // Transposed 4x4 stride-2 kernels: each output sees 2x2 taps per input channel.
            specs.push(ParamSpec::new(format!("{DECODER_OUTPUT_PREFIX}{i}.w"), vec![c, c_out, 4, 4], c * 4));
            specs.push(ParamSpec::new(format!("{DECODER_OUTPUT_PREFIX}{i}.b"), vec![c_out], 0));
        }
        specs
    }

    pub fn decoder_output_layer(&self) -> String {
        format!("{DECODER_OUTPUT_PREFIX}{}", self.blocks - 1)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.latent_shape;
        write!(
            f,
            "n={} D={} latent={c}x{h}x{w} blocks={} channels={} reg_blocks={} reg_hidden={}",
            self.image_side,
            self.latent_dim,
            self.blocks,
            self.base_channels,
            self.regressor_blocks,
            self.regressor_hidden
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for biases, which start at zero.
    pub fan_in: usize,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self { name, shape, fan_in }
    }
}

/// Which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Regressor,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "enc" => Some(Self::Encoder),
            "dec" => Some(Self::Decoder),
            "reg" => Some(Self::Regressor),
            _ => None,
        }
    }
}

/// θ_E, θ_D and θ_R keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// He-normal weights and zero biases drawn from a seeded stream.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in arch.param_specs() {
            let n: usize = spec.shape.iter().product();
            let values = if spec.fan_in == 0 {
                vec![0.0; n]
            } else {
                let std = (2.0 / spec.fan_in as f64).sqrt();
                (0..n)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            };
            let t = Tensor::new(spec.shape, values)?.with_requires_grad(true);
            tensors.insert(spec.name, t);
        }
        Ok(Self { arch, tensors })
    }

    /// Rebuilds parameters from stored tensors, checking names and shapes against `arch`.
    pub fn from_tensors(arch: Arch, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if specs.len() != tensors.len() {
            return Err(ModelError::Shape {
                what: "parameter count",
                expected: specs.len().to_string(),
                got: tensors.len().to_string(),
            });
        }
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| ModelError::UnknownParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Shape {
                    what: "parameter shape",
                    expected: format!("{} {:?}", spec.name, spec.shape),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        let tensors = tensors
            .into_iter()
            .map(|(k, t)| (k, t.with_requires_grad(true)))
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(move |(k, _)| ParamGroup::of(k) == Some(group))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Zeroes the weight and bias of layer `prefix` (e.g. [`ENCODER_HEAD`]).
    pub fn zero_layer(&mut self, prefix: &str) -> Result<()> {
        for suffix in ["w", "b"] {
            let name = format!("{prefix}.{suffix}");
            let t = self
                .tensors
                .get_mut(&name)
                .ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

/// Per-image diagonal Gaussian `q(z|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    /// Per-dimension `log λ²`.
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(ModelError::Shape {
                what: "latent",
                expected: format!("log_var of length {}", mu.len()),
                got: log_var.len().to_string(),
            });
        }
        Ok(Self { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Monotone 3-bit encoding of a severity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrdinalLabel([u8; ORDINAL_BITS]);

impl OrdinalLabel {
    pub fn from_bits(bits: [u8; ORDINAL_BITS]) -> Result<Self> {
        let binary = bits.iter().all(|&b| b <= 1);
        let monotone = bits.windows(2).all(|w| w[0] >= w[1]);
        if binary && monotone {
            Ok(Self(bits))
        } else {
            Err(ModelError::NonMonotoneLabel(bits))
        }
    }

    pub fn bits(&self) -> [u8; ORDINAL_BITS] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; ORDINAL_BITS] {
        self.0.map(f64::from)
    }

    pub fn class(&self) -> u8 {
        self.0.iter().sum()
    }
}

/// `bits[j] = 1` iff `class > j`.
pub fn ordinal_encode(class: u8) -> Result<OrdinalLabel> {
    if class > 3 {
        return Err(ModelError::InvalidClass(class));
    }
    Ok(OrdinalLabel([0, 1, 2].map(|j| u8::from(class > j))))
}

/// Per-bit probabilities `p(y_j = 1 | z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdinalPrediction(pub [f64; ORDINAL_BITS]);

impl OrdinalPrediction {
    pub fn probs(&self) -> [f64; ORDINAL_BITS] {
        self.0
    }
}

/// Expected severity `Σ_c c·P(class = c)`, which telescopes to `ŷ1 + ŷ2 + ŷ3`.
pub fn expected_severity(pred: &OrdinalPrediction) -> f64 {
    pred.0.iter().sum()
}

/// Source of standard-normal draws for the reparameterization.
pub trait NoiseSource {
    /// Fills `out` with independent `N(0, 1)` draws.
    fn standard_normal(&mut self, out: &mut [f64]);
}

impl<R: rand::RngCore> NoiseSource for R {
    fn standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(self);
        }
    }
}

/// Wraps a noise source and counts how many latent samples it produced.
#[derive(Debug)]
pub struct CountingNoise<N> {
    inner: N,
    draws: usize,
}

impl<N: NoiseSource> CountingNoise<N> {
    pub fn new(inner: N) -> Self {
        Self { inner, draws: 0 }
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn into_inner(self) -> N {
        self.inner
    }
}

impl<N: NoiseSource> NoiseSource for CountingNoise<N> {
    fn standard_normal(&mut self, out: &mut [f64]) {
        self.draws += 1;
        self.inner.standard_normal(out);
    }
}

/// Graph nodes holding a batch of latent Gaussians, each `[batch, D]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Records the networks on a [`Graph`], binding each parameter the first time it is used.
#[derive(Debug)]
pub struct Forward<'p> {
    params: &'p ModelParams,
    trainable: bool,
    bound: BTreeMap<&'p str, NodeId>,
}

impl<'p> Forward<'p> {
    /// `trainable` decides whether bound parameters request gradients.
    pub fn new(params: &'p ModelParams, trainable: bool) -> Self {
        Self {
            params,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> &'p Arch {
        &self.params.arch
    }

    /// Parameter nodes bound so far.
    pub fn bindings(&self) -> impl Iterator<Item = (&'p str, NodeId)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    fn param(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let (key, t) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        let id = g.leaf(t.clone().with_requires_grad(self.trainable));
        self.bound.insert(key.as_str(), id);
        Ok(id)
    }

    fn conv(&mut self, g: &mut Graph, x: NodeId, layer: &str, geometry: ConvGeometry) -> Result<NodeId> {
        let w = self.param(g, &format!("{layer}.w"))?;
        let b = self.param(g, &format!("{layer}.b"))?;
        Ok(g.conv2d(x, w, Some(b), geometry)?)
    }

    fn affine(&mut self, g: &mut Graph, x: NodeId, layer: &str) -> Result<NodeId> {
        let w = self.param(g, &format!("{layer}.w"))?;
        let b = self.param(g, &format!("{layer}.b"))?;
        Ok(g.affine(x, w, b)?)
    }

    /// `x: [batch, 1, n, n]` → mean and log-variance, each `[batch, D]`.
    pub fn encode(&mut self, g: &mut Graph, x: NodeId) -> Result<LatentNodes> {
        let arch = self.arch();
        let n = arch.image_side;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != n || shape[3] != n {
            return Err(ModelError::Shape {
                what: "encoder input",
                expected: format!("[batch, 1, {n}, {n}]"),
                got: format!("{shape:?}"),
            });
        }
        let batch = shape[0];
        let mut h = x;
        for i in 0..arch.blocks {
            let a = self.conv(g, h, &format!("enc.block{i}.conv_a"), ConvGeometry::new(2, 1))?;
            let a = g.relu(a)?;
            let b = self.conv(g, a, &format!("enc.block{i}.conv_b"), ConvGeometry::new(1, 1))?;
            let skip = self.conv(g, h, &format!("enc.block{i}.skip"), ConvGeometry::new(2, 0))?;
            let sum = g.add(b, skip)?;
            h = g.relu(sum)?;
        }
        let s = arch.bottleneck_side();
        let flat = g.reshape(h, &[batch, arch.base_channels * s * s])?;
        let head = self.affine(g, flat, ENCODER_HEAD)?;
        let d = arch.latent_dim;
        Ok(LatentNodes {
            mu: g.narrow(head, 1, 0, d)?,
            log_var: g.narrow(head, 1, d, d)?,
        })
    }

    /// `z: [batch, D]` → reconstruction `[batch, 1, n, n]`.
    pub fn decode(&mut self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let arch = self.arch();
        let batch = self.check_latent(g, z, "decoder input")?;
        let (c, s) = (arch.base_channels, arch.bottleneck_side());
        let h = self.affine(g, z, "dec.stem")?;
        let h = g.reshape(h, &[batch, c, s, s])?;
        let mut h = g.relu(h)?;
        for i in 0..arch.blocks {
            let layer = format!("{DECODER_OUTPUT_PREFIX}{i}");
            let w = self.param(g, &format!("{layer}.w"))?;
            let b = self.param(g, &format!("{layer}.b"))?;
            h = g.conv2d_transpose(h, w, Some(b), ConvGeometry::new(2, 1))?;
            if i + 1 < arch.blocks {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `z: [batch, D]` → per-bit probabilities `[batch, 3]`.
    pub fn regress(&mut self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let arch = self.arch();
        let batch = self.check_latent(g, z, "regressor input")?;
        let [lc, lh, lw] = arch.latent_shape;
        let k = arch.regressor_kernel();
        let same = ConvGeometry::new(1, k / 2);
        let h = g.reshape(z, &[batch, lc, lh, lw])?;
        let h = self.conv(g, h, "reg.stem", same)?;
        let mut h = g.relu(h)?;
        for i in 0..arch.regressor_blocks {
            let a = self.conv(g, h, &format!("reg.block{i}.conv_a"), same)?;
            let a = g.relu(a)?;
            let b = self.conv(g, a, &format!("reg.block{i}.conv_b"), same)?;
            let sum = g.add(b, h)?;
            h = g.relu(sum)?;
        }
        let pooled = g.avg_pool2d(h, lh, lh)?;
        let flat = g.reshape(pooled, &[batch, arch.base_channels])?;
        let hidden = self.affine(g, flat, "reg.fc1")?;
        let hidden = g.relu(hidden)?;
        let logits = self.affine(g, hidden, REGRESSOR_OUTPUT)?;
        Ok(g.sigmoid(logits)?)
    }

    fn check_latent(&self, g: &Graph, z: NodeId, what: &'static str) -> Result<usize> {
        let d = self.arch().latent_dim;
        match *g.shape(z) {
            [batch, dz] if dz == d => Ok(batch),
            ref other => Err(ModelError::Shape {
                what,
                expected: format!("[batch, {d}]"),
                got: format!("{other:?}"),
            }),
        }
    }
}

/// `z = μ + exp(½ log λ²) ⊙ ε` on the graph; `noise` is `[batch, D]` row-major.
pub fn sample_latent_nodes(g: &mut Graph, q: LatentNodes, noise: &[f64]) -> Result<NodeId> {
    let shape = g.shape(q.mu).to_vec();
    if noise.len() != shape.iter().product::<usize>() {
        return Err(ModelError::Shape {
            what: "latent noise",
            expected: format!("{} values for {shape:?}", shape.iter().product::<usize>()),
            got: noise.len().to_string(),
        });
    }
    let eps = g.constant(Tensor::new(shape, noise.to_vec())?);
    let half = g.scale_shift(q.log_var, 0.5, 0.0)?;
    let std = g.exp(half)?;
    let scaled = g.mul(std, eps)?;
    Ok(g.add(q.mu, scaled)?)
}

/// Reparameterized sample for a single latent.
pub fn sample_latent(q: &GaussianLatent, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(ModelError::Shape {
            what: "latent noise",
            expected: q.dim().to_string(),
            got: noise.len().to_string(),
        });
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

fn image_batch(x: &Tensor, n: usize) -> Result<Tensor> {
    if x.shape() != [n, n] {
        return Err(ModelError::Shape {
            what: "image",
            expected: format!("[{n}, {n}]"),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(Tensor::new(vec![1, 1, n, n], x.values().to_vec())?)
}

fn latent_batch(z: &[f64], d: usize) -> Result<Tensor> {
    if z.len() != d {
        return Err(ModelError::Shape {
            what: "latent",
            expected: d.to_string(),
            got: z.len().to_string(),
        });
    }
    Ok(Tensor::new(vec![1, d], z.to_vec())?)
}

/// Posterior `q(z|x)` for one `n×n` image.
pub fn encode(x: &Tensor, params: &ModelParams) -> Result<GaussianLatent> {
    let mut g = Graph::new();
    let xi = g.constant(image_batch(x, params.arch.image_side)?);
    let q = Forward::new(params, false).encode(&mut g, xi)?;
    GaussianLatent::new(g.value(q.mu).values().to_vec(), g.value(q.log_var).values().to_vec())
}

/// Reconstruction of shape `[n, n]` for one latent vector.
pub fn decode(z: &[f64], params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let zi = g.constant(latent_batch(z, params.arch.latent_dim)?);
    let out = Forward::new(params, false).decode(&mut g, zi)?;
    let n = params.arch.image_side;
    Ok(Tensor::new(vec![n, n], g.value(out).values().to_vec())?)
}

pub fn regress(z: &[f64], params: &ModelParams) -> Result<OrdinalPrediction> {
    let mut g = Graph::new();
    let zi = g.constant(latent_batch(z, params.arch.latent_dim)?);
    let out = Forward::new(params, false).regress(&mut g, zi)?;
    let p = g.value(out).values();
    Ok(OrdinalPrediction([p[0], p[1], p[2]]))
}
