//! A small reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its value and the data
//! its adjoint needs. Nodes are only ever appended after their inputs, so a
//! reverse sweep over the node list is a valid topological order.
//!
//! Parameters enter a graph by name through [`Graph::param`]; gradients are
//! collected back per name (summed when a name is bound more than once, which
//! is how weight sharing between branches falls out for free).

use std::collections::BTreeMap;

use crate::losses;
use crate::tensor::{col2im, conv_out_size, gemm, im2col, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        cols: Vec<f64>,
        cin: usize,
        h: usize,
        w: usize,
    },
    Relu(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        cols: usize,
    },
    Add(NodeId, NodeId),
    HardTanh(NodeId),
    Reshape(NodeId),
    ChannelMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        cols: usize,
    },
    Scale(NodeId, f64),
    Gelu(NodeId),
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    Normalize {
        x: NodeId,
        norm: f64,
    },
    StackRows(Vec<NodeId>),
    PairwiseDist {
        a: NodeId,
        b: NodeId,
        dim: usize,
    },
    RowDist {
        a: NodeId,
        b: NodeId,
        dim: usize,
    },
    TripletMean {
        dist: NodeId,
        n: usize,
        alpha: f64,
    },
    CfMean {
        dist: NodeId,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Adjoints produced by a reverse sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor { shape: self.nodes[id].shape.clone(), data: self.nodes[id].value.clone() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients (images, index maps, sampled descriptors).
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not a named parameter.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, true)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        let id = self.input(t);
        self.params.push((name.to_string(), id));
        id
    }

    /// 3x3 convolution, stride 2, padding 1. `weight` is `[cout, cin, 3, 3]`.
    pub fn conv3x3s2(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (cin, h, w) = match self.nodes[input].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => panic!("conv input must be rank 3, got {s:?}"),
        };
        let cout = self.nodes[weight].shape[0];
        assert_eq!(self.nodes[weight].shape, [cout, cin, 3, 3], "conv weight shape");
        let (ho, wo) = (conv_out_size(h), conv_out_size(w));
        let p = ho * wo;
        let cols = im2col(&self.nodes[input].value, cin, h, w);
        let mut out = vec![0.0; cout * p];
        gemm(cout, cin * 9, p, &self.nodes[weight].value, false, &cols, false, &mut out, false);
        let b = &self.nodes[bias].value;
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[o]);
        }
        let rg = self.rg(&[input, weight, bias]);
        self.push(out, vec![cout, ho, wo], Op::Conv { input, weight, bias, cols, cin, h, w }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|&a| a.max(0.0)).collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, s, Op::Relu(x), rg)
    }

    /// `[m,k] x [k,n]`, both operands taken as 2-D by their leading/trailing dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims");
        self.matmul_impl(a, b, m, k, n, false)
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        self.matmul_impl(a, b, m, k, n, true)
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, m: usize, k: usize, n: usize, b_t: bool) -> NodeId {
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.nodes[a].value, false, &self.nodes[b].value, b_t, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, b_t }, rg)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let cols = self.nodes[bias].value.len();
        assert_eq!(self.nodes[x].value.len() % cols, 0, "bias width");
        let b = &self.nodes[bias].value;
        let v = self.nodes[x]
            .value
            .iter()
            .enumerate()
            .map(|(i, &a)| a + b[i % cols])
            .collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x, bias]);
        self.push(v, s, Op::AddBias { x, bias, cols }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len(), "add lengths");
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        let s = self.nodes[a].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(v, s, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.nodes[x].value.iter().map(|a| a * s).collect();
        let sh = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, sh, Op::Scale(x, s), rg)
    }

    /// Clamp to `[-1, 1]`.
    pub fn hardtanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, s, Op::HardTanh(x), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), self.nodes[x].value.len(), "reshape size");
        let v = self.nodes[x].value.clone();
        let rg = self.rg(&[x]);
        self.push(v, shape.to_vec(), Op::Reshape(x), rg)
    }

    /// Max over the leading axis of a `[c, ...]` tensor; ties go to the lowest index.
    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        let c = shape[0];
        let p = self.nodes[x].value.len() / c;
        let xv = &self.nodes[x].value;
        let mut argmax = vec![0usize; p];
        let mut out = xv[..p].to_vec();
        for ch in 1..c {
            for j in 0..p {
                let v = xv[ch * p + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = ch;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, shape[1..].to_vec(), Op::ChannelMax { x, argmax }, rg)
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let cols = *self.nodes[x].shape.last().unwrap();
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (row[j] - mean) * is;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = xh * g[j] + b[j];
            }
        }
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, s, Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std }, rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let cols = *self.nodes[x].shape.last().unwrap();
        let mut out = self.nodes[x].value.clone();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(out, s, Op::Softmax { x, cols }, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.iter().map(|&a| gelu(a)).collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, s, Op::Gelu(x), rg)
    }

    /// Elementwise multiplication by a constant mask (inverted dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        assert_eq!(mask.len(), self.nodes[x].value.len());
        let v = self.nodes[x].value.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, s, Op::Mask { x, mask }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.dims2(x);
        assert!(start + len <= cols);
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(out, vec![rows, len], Op::SliceCols { x, cols, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p].value[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(out, vec![rows, total], Op::ConcatCols { parts: parts.to_vec(), widths }, rg)
    }

    /// Scales the whole tensor to unit Euclidean norm. The caller is
    /// responsible for rejecting near-zero inputs.
    pub fn normalize(&mut self, x: NodeId) -> NodeId {
        let norm = self.nodes[x].value.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v = self.nodes[x].value.iter().map(|a| a / norm).collect();
        let s = self.nodes[x].shape.clone();
        let rg = self.rg(&[x]);
        self.push(v, s, Op::Normalize { x, norm }, rg)
    }

    /// Stacks equal-length vectors into an `[n, d]` matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.nodes[parts[0]].value.len();
        let mut out = Vec::with_capacity(d * parts.len());
        for &p in parts {
            assert_eq!(self.nodes[p].value.len(), d, "stack_rows lengths");
            out.extend_from_slice(&self.nodes[p].value);
        }
        let rg = self.rg(parts);
        self.push(out, vec![parts.len(), d], Op::StackRows(parts.to_vec()), rg)
    }

    /// Euclidean distances between every row of `a` and every row of `b`.
    pub fn pairwise_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, dim) = self.dims2(a);
        let (m, dim2) = self.dims2(b);
        assert_eq!(dim, dim2);
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = euclid(&av[i * dim..(i + 1) * dim], &bv[j * dim..(j + 1) * dim]);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, vec![n, m], Op::PairwiseDist { a, b, dim }, rg)
    }

    /// Euclidean distance between matching rows.
    pub fn row_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, dim) = self.dims2(a);
        assert_eq!(self.dims2(b), (n, dim));
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let out = (0..n)
            .map(|i| euclid(&av[i * dim..(i + 1) * dim], &bv[i * dim..(i + 1) * dim]))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(out, vec![n], Op::RowDist { a, b, dim }, rg)
    }

    /// Mean soft-margin triplet loss over every directed in-batch triplet of
    /// an `[n, n]` ground-to-aerial distance matrix.
    pub fn triplet_mean(&mut self, dist: NodeId, alpha: f64) -> NodeId {
        let (n, n2) = self.dims2(dist);
        assert_eq!(n, n2);
        let v = losses::batch_triplet_from_distances(&self.nodes[dist].value, n, alpha);
        let rg = self.rg(&[dist]);
        self.push(vec![v], vec![1], Op::TripletMean { dist, n, alpha }, rg)
    }

    /// Mean counterfactual loss over a vector of distances.
    pub fn cf_mean(&mut self, dist: NodeId, beta: f64) -> NodeId {
        let d = &self.nodes[dist].value;
        let v = d.iter().map(|&x| losses::counterfactual_loss_from_distance(x, beta)).sum::<f64>()
            / d.len() as f64;
        let rg = self.rg(&[dist]);
        self.push(vec![v], vec![1], Op::CfMean { dist, beta }, rg)
    }

    /// Reverse sweep from a scalar root with unit seed.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep with explicit output adjoints.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Vec<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (id, seed) in seeds {
            assert_eq!(seed.len(), self.nodes[*id].value.len(), "seed length");
            let g = accumulate(&mut grads[*id], seed.len());
            g.iter_mut().zip(seed).for_each(|(a, b)| *a += b);
            last = last.max(*id);
        }
        for id in (0..=last).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    /// Gradients of every named parameter, summed over repeated bindings.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in &self.params {
            let len = self.nodes[*id].value.len();
            let slot = out.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            if let Some(g) = grads.get(*id) {
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        out
    }

    fn backprop_node(&self, id: NodeId, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |i: NodeId| self.nodes[i].requires_grad;
        let len = |i: NodeId| self.nodes[i].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, cols, cin, h, w } => {
                let cout = node.shape[0];
                let p = node.shape[1] * node.shape[2];
                let k = cin * 9;
                if needs(*weight) {
                    let gw = accumulate(&mut grads[*weight], cout * k);
                    gemm(cout, p, k, gout, false, cols, true, gw, true);
                }
                if needs(*bias) {
                    let gb = accumulate(&mut grads[*bias], cout);
                    for (o, row) in gout.chunks(p).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                if needs(*input) {
                    let mut gcols = vec![0.0; k * p];
                    gemm(k, cout, p, &self.nodes[*weight].value, true, gout, false, &mut gcols, false);
                    let gi = col2im(&gcols, *cin, *h, *w);
                    let slot = accumulate(&mut grads[*input], gi.len());
                    slot.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let g = accumulate(&mut grads[*x], xv.len());
                for i in 0..xv.len() {
                    if xv[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            }
            Op::MatMul { a, b, m, k, n, b_t } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    // dA = dC * B^T
                    let ga = accumulate(&mut grads[*a], m * k);
                    gemm(m, n, k, gout, false, &self.nodes[*b].value, !b_t, ga, true);
                }
                if needs(*b) {
                    // dB = A^T * dC, stored transposed when B was read transposed
                    let av = &self.nodes[*a].value;
                    if *b_t {
                        let gb = accumulate(&mut grads[*b], n * k);
                        gemm(n, m, k, gout, true, av, false, gb, true);
                    } else {
                        let gb = accumulate(&mut grads[*b], k * n);
                        gemm(k, m, n, av, true, gout, false, gb, true);
                    }
                }
            }
            Op::AddBias { x, bias, cols } => {
                if needs(*x) {
                    let g = accumulate(&mut grads[*x], gout.len());
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                }
                if needs(*bias) {
                    let g = accumulate(&mut grads[*bias], *cols);
                    for (i, v) in gout.iter().enumerate() {
                        g[i % cols] += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if needs(p) {
                        let g = accumulate(&mut grads[p], gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(x, s) => {
                let g = accumulate(&mut grads[*x], gout.len());
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += s * b);
            }
            Op::HardTanh(x) => {
                let xv = &self.nodes[*x].value;
                let g = accumulate(&mut grads[*x], xv.len());
                for i in 0..xv.len() {
                    if xv[i] > -1.0 && xv[i] < 1.0 {
                        g[i] += gout[i];
                    }
                }
            }
            Op::Reshape(x) => {
                let g = accumulate(&mut grads[*x], gout.len());
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }
            Op::ChannelMax { x, argmax } => {
                let p = argmax.len();
                let g = accumulate(&mut grads[*x], len(*x));
                for j in 0..p {
                    g[argmax[j] * p + j] += gout[j];
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
                let cols = *cols;
                let gv = &self.nodes[*gamma].value;
                if needs(*gamma) {
                    let gg = accumulate(&mut grads[*gamma], cols);
                    for (i, v) in gout.iter().enumerate() {
                        gg[i % cols] += v * xhat[i];
                    }
                }
                if needs(*beta) {
                    let gb = accumulate(&mut grads[*beta], cols);
                    for (i, v) in gout.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                }
                if needs(*x) {
                    let gx = accumulate(&mut grads[*x], gout.len());
                    let nf = cols as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let dxh: Vec<f64> =
                            gout[range.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xh = &xhat[range.clone()];
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += is / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let y = &node.value;
                let g = accumulate(&mut grads[*x], y.len());
                for r in 0..y.len() / cols {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = gout[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                    for j in range {
                        g[j] += y[j] * (gout[j] - dot);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let g = accumulate(&mut grads[*x], xv.len());
                for i in 0..xv.len() {
                    g[i] += gout[i] * gelu_grad(xv[i]);
                }
            }
            Op::Mask { x, mask } => {
                let g = accumulate(&mut grads[*x], mask.len());
                for i in 0..mask.len() {
                    g[i] += gout[i] * mask[i];
                }
            }
            Op::SliceCols { x, cols, start, len: w } => {
                let g = accumulate(&mut grads[*x], len(*x));
                let rows = gout.len() / w;
                for r in 0..rows {
                    for j in 0..*w {
                        g[r * cols + start + j] += gout[r * w + j];
                    }
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gout.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if needs(p) {
                        let g = accumulate(&mut grads[p], rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += gout[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Normalize { x, norm } => {
                let y = &node.value;
                let dot: f64 = y.iter().zip(gout).map(|(a, b)| a * b).sum();
                let g = accumulate(&mut grads[*x], y.len());
                for i in 0..y.len() {
                    g[i] += (gout[i] - y[i] * dot) / norm;
                }
            }
            Op::StackRows(parts) => {
                let d = gout.len() / parts.len();
                for (r, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        let g = accumulate(&mut grads[p], d);
                        g.iter_mut().zip(&gout[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::PairwiseDist { a, b, dim } => {
                let dim = *dim;
                let (n, m) = (node.shape[0], node.shape[1]);
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = vec![0.0; n * dim];
                let mut gb = vec![0.0; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let d = node.value[i * m + j];
                        if d <= 0.0 {
                            continue;
                        }
                        let c = gout[i * m + j] / d;
                        for t in 0..dim {
                            let diff = av[i * dim + t] - bv[j * dim + t];
                            ga[i * dim + t] += c * diff;
                            gb[j * dim + t] -= c * diff;
                        }
                    }
                }
                add_into(grads, *a, &ga, needs(*a));
                add_into(grads, *b, &gb, needs(*b));
            }
            Op::RowDist { a, b, dim } => {
                let dim = *dim;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = vec![0.0; av.len()];
                for (i, &d) in node.value.iter().enumerate() {
                    if d <= 0.0 {
                        continue;
                    }
                    let c = gout[i] / d;
                    for t in 0..dim {
                        ga[i * dim + t] = c * (av[i * dim + t] - bv[i * dim + t]);
                    }
                }
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                add_into(grads, *a, &ga, needs(*a));
                add_into(grads, *b, &gb, needs(*b));
            }
            Op::TripletMean { dist, n, alpha } => {
                let g = losses::batch_triplet_grad_from_distances(&self.nodes[*dist].value, *n, *alpha);
                let scaled: Vec<f64> = g.iter().map(|v| v * gout[0]).collect();
                add_into(grads, *dist, &scaled, true);
            }
            Op::CfMean { dist, beta } => {
                let d = &self.nodes[*dist].value;
                let nf = d.len() as f64;
                let g: Vec<f64> = d
                    .iter()
                    .map(|&x| gout[0] * losses::counterfactual_loss_grad(x, *beta) / nf)
                    .collect();
                add_into(grads, *dist, &g, true);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], needed: bool) {
    if !needed {
        return;
    }
    let slot = accumulate(&mut grads[id], g.len());
    slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
