//! The scale-adaptive counting network and its two ablation variants.
//!
//! A [`ModelGraph`] is an ordered list of nodes over a value table: value 0
//! is the input image and node `i` writes value `i + 1`. Skip connections
//! are plain references to earlier values, so backward only has to walk the
//! node list in reverse and accumulate gradients into each referenced value.

mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ParamId, ParamStore};

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::layers::{
    check_gradients, concat_channels, conv_backward, conv_forward, deconv_backward, deconv_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, split_channels,
    GradCheckOptions, GradCheckReport, MaxPoolLayer, PoolContext,
};
use crate::tensor::{Rng, Shape, Tensor};

/// Stride between input pixels and density cells.
pub const OUTPUT_STRIDE: usize = 8;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STDDEV: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// p-conv on conv4_2.
    SingleScale,
    /// conv4_3 and conv5_3 (pool4 at stride 1) concatenated.
    TwoScale,
    /// conv5_3 ⊕ conv6_1 at 1/16, upsampled and concatenated with conv4_3.
    ScaleAdaptive,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::SingleScale,
        Variant::TwoScale,
        Variant::ScaleAdaptive,
    ];

    /// Input height and width must be multiples of this.
    pub fn input_multiple(self) -> usize {
        match self {
            Variant::ScaleAdaptive => 16,
            _ => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SingleScale => "single-scale",
            Variant::TwoScale => "two-scale",
            Variant::ScaleAdaptive => "scale-adaptive",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected single-scale, two-scale or scale-adaptive)"
                ))
            })
    }
}

/// Output channels of conv blocks 1–5 and of conv6_1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Widths(pub [usize; 6]);

impl Widths {
    pub const FULL: Widths = Widths([64, 128, 256, 512, 512, 512]);
    pub const TINY: Widths = Widths([4, 8, 16, 32, 32, 32]);

    pub fn preset(name: &str) -> Result<Widths> {
        match name {
            "full" => Ok(Widths::FULL),
            "tiny" => Ok(Widths::TINY),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected full or tiny)"
            ))),
        }
    }

    pub fn block(&self, i: usize) -> usize {
        self.0[i - 1]
    }
}

/// Weight initialization. Biases always start at zero and the deconv
/// always starts as the 0.25 spread kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Every conv weight from N(0, stddev²).
    Gaussian { stddev: f64 },
    /// Conv weights from N(0, 2 / fan_in).
    He,
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian {
            stddev: INIT_STDDEV,
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::Gaussian { stddev } => write!(f, "gaussian:{stddev}"),
            Init::He => f.write_str("he"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    /// `he`, `gaussian` (stddev 0.01) or `gaussian:<stddev>`.
    fn from_str(s: &str) -> Result<Self> {
        let init = match s.split_once(':') {
            None if s == "he" => Init::He,
            None if s == "gaussian" => Init::default(),
            Some(("gaussian", v)) => Init::Gaussian {
                stddev: v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad init stddev {v:?}")))?,
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown init {s:?} (expected he, gaussian or gaussian:<stddev>)"
                )))
            }
        };
        Ok(init)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub widths: Widths,
    pub init: Init,
}

impl ModelConfig {
    pub fn new(variant: Variant, widths: Widths) -> Self {
        ModelConfig {
            variant,
            widths,
            init: Init::default(),
        }
    }

    pub fn tiny(variant: Variant) -> Self {
        Self::new(variant, Widths::TINY)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.0.contains(&0) {
            return Err(Error::Config(format!(
                "channel widths must be ≥ 1, got {:?}",
                self.widths.0
            )));
        }
        if let Init::Gaussian { stddev } = self.init {
            if stddev.is_nan() || stddev <= 0.0 {
                return Err(Error::Config(format!(
                    "init stddev must be positive, got {stddev}"
                )));
            }
        }
        Ok(())
    }

    /// Architecture identity written into checkpoints.
    pub fn canonical(&self) -> String {
        let w: Vec<String> = self.widths.0.iter().map(usize::to_string).collect();
        format!("sacnn variant={} widths={}", self.variant, w.join(","))
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index into the value table; 0 is the input image.
pub type ValueId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Conv { weight: ParamId, bias: ParamId },
    Relu,
    MaxPool(MaxPoolLayer),
    Deconv { weight: ParamId },
    Concat,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<ValueId>,
}

/// Node counts by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Topology {
    pub convs: usize,
    pub relus: usize,
    pub pools: usize,
    pub deconvs: usize,
    pub concats: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Density at 1/8 of the input resolution.
    pub density: DensityMap,
    /// Integral of `density`.
    pub count: f64,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    values: Vec<Tensor>,
    pools: Vec<Option<PoolContext>>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ModelConfig,
    params: ParamStore,
    nodes: Vec<Node>,
    cache: Option<ForwardCache>,
}

struct Builder<'a> {
    params: ParamStore,
    nodes: Vec<Node>,
    rng: &'a mut Rng,
    init: Init,
}

impl Builder<'_> {
    fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<ValueId>) -> ValueId {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
        });
        self.nodes.len()
    }

    fn conv(
        &mut self,
        name: &str,
        input: ValueId,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<ValueId> {
        let stddev = match self.init {
            Init::Gaussian { stddev } => stddev,
            Init::He => (2.0 / (c_in * k * k) as f64).sqrt(),
        };
        let w = Tensor::randn(Shape::new(c_out, c_in, k, k)?, self.rng, stddev)?;
        let weight = self.params.insert(format!("{name}.weight"), w)?;
        let bias = self.params.insert(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, c_out, 1, 1)?),
        )?;
        Ok(self.push(name, NodeKind::Conv { weight, bias }, vec![input]))
    }

    /// 3×3 conv followed by ReLU; `conv4_3` gets a `relu4_3` partner.
    fn conv_relu(
        &mut self,
        name: &str,
        input: ValueId,
        c_in: usize,
        c_out: usize,
    ) -> Result<ValueId> {
        let v = self.conv(name, input, c_in, c_out, 3)?;
        Ok(self.push(name.replace("conv", "relu"), NodeKind::Relu, vec![v]))
    }

    fn pool(&mut self, name: &str, input: ValueId, stride: usize) -> Result<ValueId> {
        Ok(self.push(
            name,
            NodeKind::MaxPool(MaxPoolLayer::new(stride)?),
            vec![input],
        ))
    }

    fn concat(&mut self, name: &str, a: ValueId, b: ValueId) -> ValueId {
        self.push(name, NodeKind::Concat, vec![a, b])
    }
}

/// Builds the graph for `config` with zero biases and weights drawn per `config.init`.
pub fn build_model(config: ModelConfig, rng: &mut Rng) -> Result<ModelGraph> {
    config.validate()?;
    let w = config.widths;
    let mut b = Builder {
        params: ParamStore::new(),
        nodes: Vec::new(),
        rng,
        init: config.init,
    };

    let mut v = b.conv_relu("conv1_1", 0, 1, w.block(1))?;
    v = b.conv_relu("conv1_2", v, w.block(1), w.block(1))?;
    v = b.pool("pool1", v, 2)?;
    v = b.conv_relu("conv2_1", v, w.block(1), w.block(2))?;
    v = b.conv_relu("conv2_2", v, w.block(2), w.block(2))?;
    v = b.pool("pool2", v, 2)?;
    v = b.conv_relu("conv3_1", v, w.block(2), w.block(3))?;
    v = b.conv_relu("conv3_2", v, w.block(3), w.block(3))?;
    v = b.conv_relu("conv3_3", v, w.block(3), w.block(3))?;
    v = b.pool("pool3", v, 2)?;
    v = b.conv_relu("conv4_1", v, w.block(3), w.block(4))?;
    let conv4_2 = b.conv_relu("conv4_2", v, w.block(4), w.block(4))?;

    let (head, head_channels) = match config.variant {
        Variant::SingleScale => (conv4_2, w.block(4)),
        Variant::TwoScale => {
            let conv4_3 = b.conv_relu("conv4_3", conv4_2, w.block(4), w.block(4))?;
            let mut v = b.pool("pool4", conv4_3, 1)?;
            v = b.conv_relu("conv5_1", v, w.block(4), w.block(5))?;
            v = b.conv_relu("conv5_2", v, w.block(5), w.block(5))?;
            let conv5_3 = b.conv_relu("conv5_3", v, w.block(5), w.block(5))?;
            (
                b.concat("concat", conv4_3, conv5_3),
                w.block(4) + w.block(5),
            )
        }
        Variant::ScaleAdaptive => {
            let conv4_3 = b.conv_relu("conv4_3", conv4_2, w.block(4), w.block(4))?;
            let mut v = b.pool("pool4", conv4_3, 2)?;
            v = b.conv_relu("conv5_1", v, w.block(4), w.block(5))?;
            v = b.conv_relu("conv5_2", v, w.block(5), w.block(5))?;
            let conv5_3 = b.conv_relu("conv5_3", v, w.block(5), w.block(5))?;
            let v = b.pool("pool5", conv5_3, 1)?;
            let conv6_1 = b.conv_relu("conv6_1", v, w.block(5), w.block(6))?;
            let deep = b.concat("concat_deep", conv5_3, conv6_1);
            let deep_channels = w.block(5) + w.block(6);
            // Starts as a mass-preserving per-channel spread: 0.25 into each output cell.
            let mut kernel = Tensor::zeros(Shape::new(deep_channels, deep_channels, 2, 2)?);
            for c in 0..deep_channels {
                for t in 0..4 {
                    kernel.set(c, c, t / 2, t % 2, 0.25);
                }
            }
            let weight = b.params.insert("deconv.weight", kernel)?;
            let up = b.push("deconv", NodeKind::Deconv { weight }, vec![deep]);
            (
                b.concat("concat_fuse", up, conv4_3),
                deep_channels + w.block(4),
            )
        }
    };
    let v = b.conv("p_conv", head, head_channels, 1, 1)?;
    b.push("relu_out", NodeKind::Relu, vec![v]);

    Ok(ModelGraph {
        config,
        params: b.params,
        nodes: b.nodes,
        cache: None,
    })
}

/// Center-crops height and width down to the largest multiple of `m`.
pub fn crop_to_multiple(image: &Tensor, m: usize) -> Result<Tensor> {
    let (top, left, h, w) = crop_window(image.shape().h, image.shape().w, m)?;
    image.crop(top, left, h, w)
}

/// `(top, left, height, width)` of the centered crop used by [`crop_to_multiple`].
pub fn crop_window(height: usize, width: usize, m: usize) -> Result<(usize, usize, usize, usize)> {
    if m == 0 || height < m || width < m {
        return Err(Error::Data(format!(
            "{width}x{height} image is smaller than the required multiple {m}"
        )));
    }
    let (h, w) = (height / m * m, width / m * m);
    Ok(((height - h) / 2, (width - w) / 2, h, w))
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

impl ModelGraph {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn topology(&self) -> Topology {
        let mut t = Topology::default();
        for node in &self.nodes {
            match node.kind {
                NodeKind::Conv { .. } => t.convs += 1,
                NodeKind::Relu => t.relus += 1,
                NodeKind::MaxPool(_) => t.pools += 1,
                NodeKind::Deconv { .. } => t.deconvs += 1,
                NodeKind::Concat => t.concats += 1,
            }
        }
        t
    }

    /// Output of the named node from the last forward pass.
    pub fn activation(&self, name: &str) -> Option<&Tensor> {
        let cache = self.cache.as_ref()?;
        let i = self.nodes.iter().position(|n| n.name == name)?;
        cache.values.get(i + 1)
    }

    /// Redraws every weight from N(0, 2/fan_in) and every bias from N(0, 0.1²),
    /// except the output projection's bias, which is set to 3.
    ///
    /// Gives activations of order one, which finite-difference checks need;
    /// the training initialization is far too small for that.
    pub fn randomize_for_check(&mut self, rng: &mut Rng) -> Result<()> {
        for node in &self.nodes {
            match node.kind {
                NodeKind::Conv { weight, bias } => {
                    let s = self.params.get(weight).shape();
                    let fan_in = (s.c * s.h * s.w) as f64;
                    *self.params.get_mut(weight) = Tensor::randn(s, rng, (2.0 / fan_in).sqrt())?;
                    let bs = self.params.get(bias).shape();
                    *self.params.get_mut(bias) = Tensor::randn(bs, rng, 0.1)?;
                }
                NodeKind::Deconv { weight } => {
                    let s = self.params.get(weight).shape();
                    *self.params.get_mut(weight) =
                        Tensor::randn(s, rng, (1.0 / s.n as f64).sqrt())?;
                }
                _ => {}
            }
        }
        // Keep the output ReLU open so every output cell carries gradient.
        if let Some(bias) = self.params.find("p_conv.bias") {
            self.params.get_mut(bias).data_mut().fill(3.0);
        }
        self.cache = None;
        Ok(())
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model expects a single grayscale image (1, 1, H, W), got {s}"
            )));
        }
        let m = self.config.variant.input_multiple();
        if !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} input is not a multiple of {m} for the {} model; crop it with crop_to_multiple first",
                s.w, s.h, self.config.variant
            )));
        }
        Ok(())
    }

    /// Runs the network and caches activations for [`ModelGraph::backward`].
    pub fn forward(&mut self, image: &Tensor) -> Result<Prediction> {
        self.check_input(image)?;
        let mut values = Vec::with_capacity(self.nodes.len() + 1);
        let mut pools = Vec::with_capacity(self.nodes.len());
        values.push(image.clone());
        for node in &self.nodes {
            let x = &values[node.inputs[0]];
            let (out, ctx) = match &node.kind {
                NodeKind::Conv { weight, bias } => (
                    conv_forward(x, self.params.get(*weight), self.params.get(*bias))?,
                    None,
                ),
                NodeKind::Relu => (relu_forward(x), None),
                NodeKind::MaxPool(layer) => {
                    let (out, ctx) = maxpool_forward(x, layer)?;
                    (out, Some(ctx))
                }
                NodeKind::Deconv { weight } => (deconv_forward(x, self.params.get(*weight))?, None),
                NodeKind::Concat => (concat_channels(x, &values[node.inputs[1]])?, None),
            };
            values.push(out);
            pools.push(ctx);
        }
        let density = DensityMap::new(values.last().expect("non-empty graph").clone())?;
        let count = density.integral();
        self.cache = Some(ForwardCache { values, pools });
        Ok(Prediction { density, count })
    }

    /// Parameter gradients of `<grad_density, F_D> + grad_count · F_Y` at the
    /// last forward input.
    pub fn backward(&self, grad_density: &Tensor, grad_count: f64) -> Result<ParamStore> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out = cache.values.last().expect("non-empty graph");
        if grad_density.shape() != out.shape() {
            return Err(Error::ShapeMismatch(format!(
                "density gradient {} vs output {}",
                grad_density.shape(),
                out.shape()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut value_grads: Vec<Option<Tensor>> = vec![None; cache.values.len()];
        *value_grads.last_mut().unwrap() = Some(grad_density.map(|g| g + grad_count));

        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = value_grads[i + 1].take() else {
                continue;
            };
            let x = &cache.values[node.inputs[0]];
            match &node.kind {
                NodeKind::Conv { weight, bias } => {
                    let lg = conv_backward(x, self.params.get(*weight), &g)?;
                    grads
                        .get_mut(*weight)
                        .add_assign(&lg.grad_weight.unwrap())?;
                    grads.get_mut(*bias).add_assign(&lg.grad_bias.unwrap())?;
                    if node.inputs[0] != 0 {
                        accumulate(&mut value_grads[node.inputs[0]], lg.grad_input)?;
                    }
                }
                NodeKind::Relu => {
                    accumulate(&mut value_grads[node.inputs[0]], relu_backward(x, &g)?)?;
                }
                NodeKind::MaxPool(_) => {
                    let ctx = cache.pools[i].as_ref().expect("pool context cached");
                    accumulate(&mut value_grads[node.inputs[0]], maxpool_backward(ctx, &g)?)?;
                }
                NodeKind::Deconv { weight } => {
                    let lg = deconv_backward(x, self.params.get(*weight), &g)?;
                    grads
                        .get_mut(*weight)
                        .add_assign(&lg.grad_weight.unwrap())?;
                    accumulate(&mut value_grads[node.inputs[0]], lg.grad_input)?;
                }
                NodeKind::Concat => {
                    let (ga, gb) = split_channels(&g, x.shape().c)?;
                    accumulate(&mut value_grads[node.inputs[0]], ga)?;
                    accumulate(&mut value_grads[node.inputs[1]], gb)?;
                }
            }
        }
        Ok(grads)
    }

    /// Replaces the parameters with `params`, which must match names and shapes.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.expect_compatible(&params)?;
        self.params = params;
        self.cache = None;
        Ok(())
    }
}

/// Side of the random input used by [`model_grad_check`].
pub const GRADCHECK_INPUT_SIDE: usize = 16;

/// Finite-difference check of every parameter tensor of a freshly built
/// model, on the scalar `<r, F_D> + 0.3 F_Y` for a random probe `r`.
/// Weights are redrawn with [`ModelGraph::randomize_for_check`] first.
pub fn model_grad_check(
    config: ModelConfig,
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = build_model(config, rng)?;
    g.randomize_for_check(rng)?;
    let side = GRADCHECK_INPUT_SIDE;
    let x = Tensor::rand_uniform(Shape::new(1, 1, side, side)?, rng, 0.0, 1.0);
    let p = g.forward(&x)?;
    let probe = Tensor::randn(p.density.grid().shape(), rng, 1.0)?;
    let count_weight = 0.3;
    let analytic = g.backward(&probe, count_weight)?;
    // An all-zero gradient would pass trivially; refuse to call that a check.
    if let Some((name, _)) = analytic
        .iter()
        .find(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    {
        return Err(Error::State(format!(
            "gradient of {name} is identically zero at the check point"
        )));
    }
    let mut vars = g.params().tensors().to_vec();
    check_gradients(&mut vars, analytic.tensors(), opts, rng, |v| {
        g.params_mut().tensors_mut().clone_from_slice(v);
        let p = g.forward(&x)?;
        Ok(p.density.grid().dot(&probe)? + count_weight * p.count)
    })
}
