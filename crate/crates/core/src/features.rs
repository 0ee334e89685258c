//! Desk-scale CNN backbone and the channel-wise saliency / index maps the
//! layout extractor consumes.
//!
//! The backbone is four `[3x3 conv, stride 2, bias, ReLU]` blocks with
//! channels `3 -> 8 -> 16 -> 32 -> C`, for a total stride of 16.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::tensor::Tensor;

/// Product of the backbone strides.
pub const DOWNSAMPLE: usize = 16;
const HIDDEN_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ground,
    Aerial,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Ground, Branch::Aerial];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Ground => "ground",
            Branch::Aerial => "aerial",
        }
    }
}

/// Architecture shape shared by both branches. Image sizes are the sizes fed
/// to each branch, i.e. after any polar transform of the aerial view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone output channels (C).
    pub channels: usize,
    /// Number of layout descriptors (K).
    pub descriptors: usize,
    pub ground_size: (usize, usize),
    pub aerial_size: (usize, usize),
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub share_weights: bool,
    pub normalize_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            descriptors: 8,
            ground_size: (64, 256),
            aerial_size: (64, 256),
            heads: 4,
            layers: 2,
            ff_dim: 64,
            dropout: 0.3,
            share_weights: false,
            normalize_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn input_size(&self, branch: Branch) -> (usize, usize) {
        match branch {
            Branch::Ground => self.ground_size,
            Branch::Aerial => self.aerial_size,
        }
    }

    /// Feature grid `(H, W)` of a branch.
    pub fn grid(&self, branch: Branch) -> (usize, usize) {
        let (h, w) = self.input_size(branch);
        (h / DOWNSAMPLE, w / DOWNSAMPLE)
    }

    /// Token width of the layout extractor, `H*W/2`.
    pub fn embed_dim(&self, branch: Branch) -> usize {
        let (h, w) = self.grid(branch);
        h * w / 2
    }

    pub fn embedding_len(&self) -> usize {
        self.channels * self.descriptors
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.descriptors == 0 {
            return bad(format!("channels ({}) and descriptors ({}) must be positive", self.channels, self.descriptors));
        }
        if self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return bad("heads, layers and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        for b in Branch::BOTH {
            let (h, w) = self.input_size(b);
            if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
                return bad(format!(
                    "{} input {}x{} must be a positive multiple of the backbone stride {}",
                    b.name(),
                    h,
                    w,
                    DOWNSAMPLE
                ));
            }
            let (gh, gw) = self.grid(b);
            if (gh * gw) % 2 != 0 {
                return bad(format!("{} feature grid {}x{} has an odd number of cells", b.name(), gh, gw));
            }
            let d = self.embed_dim(b);
            if d % self.heads != 0 {
                return bad(format!("{} embedding width {} is not divisible by {} heads", b.name(), d, self.heads));
            }
        }
        if self.share_weights && self.ground_size != self.aerial_size {
            return bad(format!(
                "shared weights need equal branch inputs, got ground {:?} vs aerial {:?}",
                self.ground_size, self.aerial_size
            ));
        }
        Ok(())
    }
}

/// Backbone output, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub data: Tensor,
    pub branch: Branch,
}

impl RawFeatures {
    pub fn new(data: Tensor, branch: Branch) -> Result<Self> {
        if data.shape.len() != 3 {
            return Err(Error::shape(format!("raw features must be [C,H,W], got {:?}", data.shape)));
        }
        if data.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("raw features contain non-finite values"));
        }
        Ok(RawFeatures { data, branch })
    }

    pub fn channels(&self) -> usize {
        self.data.shape[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape[1], self.data.shape[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[cout, cin, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub convs: Vec<ConvParams>,
}

impl BackboneParams {
    /// He-normal kernels; small positive biases keep pre-activations off the ReLU kink.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut cin = 3;
        let plan = HIDDEN_CHANNELS.iter().copied().chain(std::iter::once(channels));
        let convs = plan
            .map(|cout| {
                let fan_in = (cin * 9) as f64;
                let weight = Tensor::randn(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng);
                cin = cout;
                ConvParams { weight, bias: Tensor::filled(&[cout], 0.01) }
            })
            .collect();
        BackboneParams { convs }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(format!("{prefix}.conv{i}.weight"), &c.weight);
            f(format!("{prefix}.conv{i}.bias"), &c.bias);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(format!("{prefix}.conv{i}.weight"), &mut c.weight);
            f(format!("{prefix}.conv{i}.bias"), &mut c.bias);
        }
    }

    /// Records the backbone on `g`, binding parameters under `prefix`.
    pub fn forward_graph(&self, g: &mut Graph, input: NodeId, prefix: &str) -> NodeId {
        let mut x = input;
        for (i, c) in self.convs.iter().enumerate() {
            let w = g.param(&format!("{prefix}.conv{i}.weight"), &c.weight);
            let b = g.param(&format!("{prefix}.conv{i}.bias"), &c.bias);
            let y = g.conv3x3s2(x, w, b);
            x = g.relu(y);
        }
        x
    }
}

pub(crate) fn check_image_size(img: &Image, cfg: &ModelConfig, branch: Branch) -> Result<()> {
    if img.height % DOWNSAMPLE != 0 || img.width % DOWNSAMPLE != 0 {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by the backbone stride {}",
            img.height, img.width, DOWNSAMPLE
        )));
    }
    let want = cfg.input_size(branch);
    if (img.height, img.width) != want {
        return Err(Error::shape(format!(
            "{} branch expects {}x{} input, got {}x{}",
            branch.name(),
            want.0,
            want.1,
            img.height,
            img.width
        )));
    }
    Ok(())
}

/// Runs the backbone on one image.
pub fn backbone_forward(
    img: &Image,
    params: &BackboneParams,
    cfg: &ModelConfig,
    branch: Branch,
) -> Result<RawFeatures> {
    check_image_size(img, cfg, branch)?;
    if params.convs.last().map(|c| c.weight.shape[0]) != Some(cfg.channels) {
        return Err(Error::shape(format!("backbone does not produce {} channels", cfg.channels)));
    }
    let mut g = Graph::new();
    let x = g.constant(&img.to_chw());
    let out = params.forward_graph(&mut g, x, "backbone");
    RawFeatures::new(g.tensor(out), branch)
}

/// Channel-wise max of the raw features, `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Per-position argmax channel divided by `C`; ties resolve to the lowest channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn argmax_per_position(r: &RawFeatures) -> Vec<(usize, f64)> {
    let c = r.channels();
    let (h, w) = r.grid();
    let p = h * w;
    let d = &r.data.data;
    (0..p)
        .map(|j| {
            (1..c).fold((0, d[j]), |(bi, bv), ch| {
                let v = d[ch * p + j];
                if v > bv { (ch, v) } else { (bi, bv) }
            })
        })
        .collect()
}

pub fn saliency_map(r: &RawFeatures) -> SaliencyMap {
    let (height, width) = r.grid();
    SaliencyMap { height, width, data: argmax_per_position(r).into_iter().map(|(_, v)| v).collect() }
}

pub fn index_map(r: &RawFeatures) -> IndexMap {
    let (height, width) = r.grid();
    let c = r.channels() as f64;
    IndexMap { height, width, data: argmax_per_position(r).into_iter().map(|(i, _)| i as f64 / c).collect() }
}
