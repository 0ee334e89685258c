//! Two-branch model: parameters, per-image forward graphs, and the batch
//! objective with gradients.
//!
//! A batch is differentiated in two stages. Each image gets its own graph
//! (so items can run on separate threads); a small loss graph over the
//! resulting embeddings is differentiated first, and its adjoints seed the
//! per-image graphs. Per-item parameter gradients are summed in item order,
//! so results do not depend on scheduling.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, NodeId};
use crate::embedding::{ModulatedEmbedding, MIN_NORM};
use crate::error::{Error, Result};
use crate::features::{check_image_size, BackboneParams, Branch, ModelConfig};
use crate::imaging::Image;
use crate::layout::{DropoutRng, EncoderSettings, ExtractorParams, LayoutDescriptors};
use crate::losses::{LossBreakdown, LossConfig};
use crate::rng;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub backbone: BackboneParams,
    pub extractor: ExtractorParams,
}

impl BranchParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, branch: Branch, rng: &mut R) -> Self {
        BranchParams {
            backbone: BackboneParams::init(cfg.channels, rng),
            extractor: ExtractorParams::init(cfg, branch, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit(&format!("{prefix}.backbone"), f);
        self.extractor.visit(&format!("{prefix}.extractor"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), f);
        self.extractor.visit_mut(&format!("{prefix}.extractor"), f);
    }
}

/// Parameters of both branches. With shared weights a single set serves both views.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    branches: Vec<BranchParams>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::derived(seed, &[0x1417]);
        let branches = if cfg.share_weights {
            vec![BranchParams::init(cfg, Branch::Ground, &mut r)]
        } else {
            Branch::BOTH.iter().map(|&b| BranchParams::init(cfg, b, &mut r)).collect()
        };
        ModelParams { branches }
    }

    pub fn is_shared(&self) -> bool {
        self.branches.len() == 1
    }

    pub fn branch(&self, b: Branch) -> &BranchParams {
        match (self.is_shared(), b) {
            (true, _) | (false, Branch::Ground) => &self.branches[0],
            (false, Branch::Aerial) => &self.branches[1],
        }
    }

    pub fn prefix(&self, b: Branch) -> &'static str {
        if self.is_shared() { "shared" } else { b.name() }
    }

    fn prefixes(&self) -> Vec<&'static str> {
        if self.is_shared() { vec!["shared"] } else { vec!["ground", "aerial"] }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (bp, prefix) in self.branches.iter().zip(self.prefixes()) {
            bp.visit(prefix, &mut |n, t| out.push((n, t)));
        }
        out
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let prefixes = self.prefixes();
        for (bp, prefix) in self.branches.iter_mut().zip(prefixes) {
            bp.visit_mut(prefix, f);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(cfg, 0);
        let mut missing = Vec::new();
        let mut mismatch = None;
        params.visit_mut(&mut |name, t| match tensors.get(&name) {
            None => missing.push(name),
            Some(src) if src.shape != t.shape => {
                if mismatch.is_none() {
                    mismatch = Some(format!(
                        "tensor {name} has shape {:?} but the config expects {:?} ({})",
                        src.shape,
                        t.shape,
                        describe_dims(&name, cfg)
                    ));
                }
            }
            Some(src) => t.data.clone_from(&src.data),
        });
        if let Some(m) = mismatch {
            return Err(Error::shape(m));
        }
        if !missing.is_empty() {
            return Err(Error::shape(format!("missing parameter tensors: {}", missing.join(", "))));
        }
        Ok(params)
    }
}

/// Names the config dimensions that determine a parameter's shape.
fn describe_dims(name: &str, cfg: &ModelConfig) -> String {
    let branch = if name.starts_with("aerial") { Branch::Aerial } else { Branch::Ground };
    let (h, w) = cfg.grid(branch);
    if name.contains(".backbone.") {
        format!("channels C={}", cfg.channels)
    } else if name.contains(".layer") && name.contains("ff") {
        format!("ff_dim={}, embedding width D={}", cfg.ff_dim, cfg.embed_dim(branch))
    } else {
        format!(
            "descriptors K={}, {} feature grid H={} W={}, embedding width D={}",
            cfg.descriptors,
            branch.name(),
            h,
            w,
            cfg.embed_dim(branch)
        )
    }
}

/// Recorded forward pass of one image through one branch.
pub struct BranchForward {
    pub graph: Graph,
    pub raw: NodeId,
    pub descriptors: NodeId,
    pub f: NodeId,
    pub f_hat: Option<NodeId>,
    normalized: bool,
}

impl BranchForward {
    pub fn embedding(&self) -> ModulatedEmbedding {
        ModulatedEmbedding { data: self.graph.value(self.f).to_vec(), normalized: self.normalized }
    }

    pub fn counterfactual(&self) -> Option<ModulatedEmbedding> {
        self.f_hat.map(|id| ModulatedEmbedding { data: self.graph.value(id).to_vec(), normalized: self.normalized })
    }

    pub fn descriptors(&self, grid: (usize, usize)) -> LayoutDescriptors {
        let k = self.graph.shape(self.descriptors)[0];
        LayoutDescriptors { data: Tensor { shape: vec![k, grid.0, grid.1], data: self.graph.value(self.descriptors).to_vec() } }
    }
}

fn finish_embedding(g: &mut Graph, raw_f: NodeId, normalize: bool) -> Result<NodeId> {
    let n = g.value(raw_f).len();
    let flat = g.reshape(raw_f, &[n]);
    if !normalize {
        return Ok(flat);
    }
    let norm = g.value(flat).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > MIN_NORM) {
        return Err(Error::ZeroNorm(norm));
    }
    Ok(g.normalize(flat))
}

/// Records backbone, extractor and modulation for one image. With `imaginary`
/// set, also records the counterfactual embedding built from those descriptors.
pub fn forward_branch(
    params: &BranchParams,
    prefix: &str,
    cfg: &ModelConfig,
    branch: Branch,
    img: &Image,
    imaginary: Option<&LayoutDescriptors>,
    rng: DropoutRng<'_>,
) -> Result<BranchForward> {
    check_image_size(img, cfg, branch)?;
    let mut g = Graph::new();
    let x = g.constant(&img.to_chw());
    let raw = params.backbone.forward_graph(&mut g, x, &format!("{prefix}.backbone"));
    let settings = EncoderSettings::from(cfg);
    let p = params.extractor.descriptors_graph(&mut g, raw, &format!("{prefix}.extractor"), settings, rng);
    let f = g.matmul_bt(p, raw);
    let f = finish_embedding(&mut g, f, cfg.normalize_embeddings)?;
    let f_hat = match imaginary {
        None => None,
        Some(ph) => {
            if ph.data.len() != g.value(p).len() {
                return Err(Error::shape(format!(
                    "imaginary descriptors {:?} do not match the {} descriptor grid",
                    ph.data.shape,
                    branch.name()
                )));
            }
            let k = ph.count();
            let phn = g.constant(&Tensor { shape: vec![k, ph.data.len() / k], data: ph.data.data.clone() });
            let fh = g.matmul_bt(phn, raw);
            Some(finish_embedding(&mut g, fh, cfg.normalize_embeddings)?)
        }
    };
    Ok(BranchForward { graph: g, raw, descriptors: p, f, f_hat, normalized: cfg.normalize_embeddings })
}

/// One mini-batch of branch inputs. `aerial` holds the images as fed to the
/// aerial branch (already polar-transformed when that option is on).
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub ground: Vec<Image>,
    pub aerial: Vec<Image>,
    /// Counterfactual descriptors per item; may be empty when CF is disabled.
    pub imaginary_ground: Vec<LayoutDescriptors>,
    pub imaginary_aerial: Vec<LayoutDescriptors>,
    /// Per-item `[ground, aerial]` dropout seeds; `None` runs in evaluation mode.
    pub dropout_seeds: Option<Vec<[u64; 2]>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.ground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground.is_empty()
    }

    /// Draws imaginary descriptors for every item from per-item streams.
    pub fn sample_imaginary(&mut self, cfg: &ModelConfig, seed: u64) {
        let k = cfg.descriptors;
        let (gh, gw) = cfg.grid(Branch::Ground);
        let (ah, aw) = cfg.grid(Branch::Aerial);
        self.imaginary_ground = (0..self.len())
            .map(|i| crate::losses::sample_imaginary_descriptors(k, gh, gw, &mut rng::derived(seed, &[i as u64, 0])))
            .collect();
        self.imaginary_aerial = (0..self.len())
            .map(|i| crate::losses::sample_imaginary_descriptors(k, ah, aw, &mut rng::derived(seed, &[i as u64, 1])))
            .collect();
    }
}

/// Which loss terms to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Triplet plus (when enabled) both counterfactual terms.
    Total,
    /// Only the counterfactual terms (zero when CF is disabled).
    CounterfactualOnly,
}

struct LossGraph {
    graph: Graph,
    leaves_f: [Vec<NodeId>; 2],
    leaves_fhat: [Vec<NodeId>; 2],
    triplet: NodeId,
    cf: Option<[NodeId; 2]>,
}

fn build_loss_graph(fwd: &[[BranchForward; 2]], loss: &LossConfig) -> LossGraph {
    let mut g = Graph::new();
    let mut leaves_f: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
    let mut leaves_fhat: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
    for item in fwd {
        for v in 0..2 {
            let t = item[v].graph.tensor(item[v].f);
            leaves_f[v].push(g.input(&t));
            if loss.cf_enabled {
                let fh = item[v].f_hat.expect("counterfactual embedding recorded when CF is enabled");
                leaves_fhat[v].push(g.input(&item[v].graph.tensor(fh)));
            }
        }
    }
    let fg = g.stack_rows(&leaves_f[0]);
    let fa = g.stack_rows(&leaves_f[1]);
    let d = g.pairwise_dist(fg, fa);
    let triplet = g.triplet_mean(d, loss.alpha);
    let cf = loss.cf_enabled.then(|| {
        let betas = [loss.beta_ground, loss.beta_aerial];
        let mut out = [0; 2];
        for v in 0..2 {
            let f = if v == 0 { fg } else { fa };
            let fh = g.stack_rows(&leaves_fhat[v]);
            let dist = g.row_dist(f, fh);
            out[v] = g.cf_mean(dist, betas[v]);
        }
        out
    });
    LossGraph { graph: g, leaves_f, leaves_fhat, triplet, cf }
}

fn breakdown(lg: &LossGraph) -> LossBreakdown {
    let v = |id: NodeId| lg.graph.value(id)[0];
    LossBreakdown {
        triplet: v(lg.triplet),
        cf_ground: lg.cf.map_or(0.0, |c| v(c[0])),
        cf_aerial: lg.cf.map_or(0.0, |c| v(c[1])),
    }
}

fn forward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: &LossConfig,
    batch: &TrainingBatch,
) -> Result<Vec<[BranchForward; 2]>> {
    let n = batch.len();
    if batch.aerial.len() != n {
        return Err(Error::shape(format!("{} ground vs {} aerial images", n, batch.aerial.len())));
    }
    if n < 2 {
        return Err(Error::invalid(format!("a batch needs at least 2 pairs, got {n}")));
    }
    if loss.cf_enabled && (batch.imaginary_ground.len() != n || batch.imaginary_aerial.len() != n) {
        return Err(Error::invalid("counterfactual loss enabled but imaginary descriptors are missing"));
    }
    if let Some(s) = &batch.dropout_seeds {
        if s.len() != n {
            return Err(Error::invalid(format!("{} dropout seeds for {} items", s.len(), n)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, 0), (i, 1)]).collect();
    let results: Vec<Result<BranchForward>> = jobs
        .par_iter()
        .map(|&(i, v)| {
            let branch = Branch::BOTH[v];
            let img = if v == 0 { &batch.ground[i] } else { &batch.aerial[i] };
            let imaginary = if !loss.cf_enabled {
                None
            } else if v == 0 {
                Some(&batch.imaginary_ground[i])
            } else {
                Some(&batch.imaginary_aerial[i])
            };
            let mut drop_rng = batch.dropout_seeds.as_ref().map(|s| rng::seeded(s[i][v]));
            forward_branch(params.branch(branch), params.prefix(branch), cfg, branch, img, imaginary, drop_rng.as_mut())
        })
        .collect();
    let mut it = results.into_iter();
    let mut out = Vec::with_capacity(n);
    while let (Some(g), Some(a)) = (it.next(), it.next()) {
        out.push([g?, a?]);
    }
    Ok(out)
}

/// Loss components of a batch (forward only).
pub fn total_loss(batch: &TrainingBatch, params: &ModelParams, cfg: &ModelConfig, loss: &LossConfig) -> Result<LossBreakdown> {
    let fwd = forward_batch(params, cfg, loss, batch)?;
    Ok(breakdown(&build_loss_graph(&fwd, loss)))
}

/// Loss components and the gradient of the chosen objective with respect to
/// every named parameter.
pub fn loss_and_grads(
    batch: &TrainingBatch,
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: &LossConfig,
    objective: Objective,
) -> Result<(LossBreakdown, Grads)> {
    let fwd = forward_batch(params, cfg, loss, batch)?;
    let lg = build_loss_graph(&fwd, loss);
    let parts = breakdown(&lg);

    let mut seeds = Vec::new();
    if objective == Objective::Total {
        seeds.push((lg.triplet, vec![1.0]));
    }
    if let Some(cf) = lg.cf {
        seeds.push((cf[0], vec![1.0]));
        seeds.push((cf[1], vec![1.0]));
    }

    let mut grads: Grads = params.named().into_iter().map(|(n, t)| (n, vec![0.0; t.len()])).collect();
    if seeds.is_empty() {
        return Ok((parts, grads));
    }
    let adj = lg.graph.backward_seeded(&seeds);
    let leaf_grad = |id: NodeId| adj.get(id).map(|g| g.to_vec());

    let per_item: Vec<Grads> = fwd
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, item)| {
            let leaf_grad = &leaf_grad;
            let lg = &lg;
            (0..2).map(move |v| {
                let bf = &item[v];
                let mut item_seeds = Vec::new();
                if let Some(g) = leaf_grad(lg.leaves_f[v][i]) {
                    item_seeds.push((bf.f, g));
                }
                if let (Some(fh), Some(&leaf)) = (bf.f_hat, lg.leaves_fhat[v].get(i)) {
                    if let Some(g) = leaf_grad(leaf) {
                        item_seeds.push((fh, g));
                    }
                }
                if item_seeds.is_empty() {
                    return Grads::new();
                }
                let a = bf.graph.backward_seeded(&item_seeds);
                bf.graph.param_grads(&a)
            })
        })
        .collect();
    for g in per_item {
        for (name, v) in g {
            let slot = grads.get_mut(&name).expect("graph binds only known parameter names");
            slot.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
    }
    Ok((parts, grads))
}
