//! Passage graph exploration: seed set, hop expansion, a two-layer graph
//! attention network, and rescoring against the question.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, HyperlinkGraph};
use crate::error::{Error, Result};
use crate::math::{elu, elu_grad, leaky_relu, leaky_relu_grad, softmax};

/// `P_0` with per-source membership kept for diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub from_answers: BTreeSet<usize>,
    pub from_dense: BTreeSet<usize>,
    pub from_tfidf: BTreeSet<usize>,
}

impl SeedSet {
    pub fn new(
        answers: impl IntoIterator<Item = usize>,
        dense: impl IntoIterator<Item = usize>,
        tfidf: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            from_answers: answers.into_iter().collect(),
            from_dense: dense.into_iter().collect(),
            from_tfidf: tfidf.into_iter().collect(),
        }
    }

    pub fn union(&self) -> BTreeSet<usize> {
        self.from_answers
            .iter()
            .chain(&self.from_dense)
            .chain(&self.from_tfidf)
            .copied()
            .collect()
    }
}

/// Induced subgraph `G_m` over the expanded node set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGraph {
    /// Corpus indices, ordered by (hop, index).
    pub nodes: Vec<usize>,
    pub hops: Vec<u32>,
    /// Local neighbour lists, ascending, without self-loops.
    pub neighbors: Vec<Vec<usize>>,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn local_index(&self, corpus_index: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == corpus_index)
    }

    /// Undirected edges as local pairs `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }
}

/// Breadth-first closure of the seeds to `m` hops. Seeds are always kept;
/// beyond them nodes are admitted in (hop, index) order until `node_cap`.
pub fn expand(seed: &SeedSet, graph: &HyperlinkGraph, m: usize, node_cap: usize) -> SubGraph {
    let mut nodes: Vec<usize> = seed.union().into_iter().collect();
    let mut hops = vec![0u32; nodes.len()];
    let mut visited: BTreeSet<usize> = nodes.iter().copied().collect();
    let mut frontier = nodes.clone();
    'outer: for hop in 1..=m {
        let next: BTreeSet<usize> = frontier
            .iter()
            .flat_map(|&n| graph.neighbors(n).iter().copied())
            .filter(|n| !visited.contains(n))
            .collect();
        frontier = Vec::with_capacity(next.len());
        for n in next {
            if nodes.len() >= node_cap {
                break 'outer;
            }
            visited.insert(n);
            nodes.push(n);
            hops.push(hop as u32);
            frontier.push(n);
        }
    }
    let neighbors = nodes
        .iter()
        .map(|&n| {
            let mut local: Vec<usize> = graph
                .neighbors(n)
                .iter()
                .filter_map(|&j| nodes.iter().position(|&x| x == j))
                .collect();
            local.sort_unstable();
            local
        })
        .collect();
    SubGraph { nodes, hops, neighbors }
}

/// Gathers per-node input vectors, failing on the first node without one.
pub fn node_matrix(
    sub: &SubGraph,
    corpus: &Corpus,
    dim: usize,
    lookup: impl Fn(usize) -> Option<Array1<f64>>,
) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((sub.len(), dim));
    for (row, &n) in sub.nodes.iter().enumerate() {
        let v = lookup(n).ok_or_else(|| Error::MissingNodeVector(corpus.passage(n).id.clone()))?;
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        x.row_mut(row).assign(&v);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    /// `out x in`.
    pub w: Array2<f64>,
    pub a_self: Array1<f64>,
    pub a_neigh: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Concat,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub combine: Combine,
    pub elu: bool,
}

impl GatLayer {
    pub fn out_dim(&self) -> usize {
        let d = self.heads[0].w.nrows();
        match self.combine {
            Combine::Concat => d * self.heads.len(),
            Combine::Mean => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub layers: Vec<GatLayer>,
    pub slope: f64,
}

impl GatParams {
    /// Near-identity projections with a small perturbation, so the
    /// untrained explorer starts close to scoring the raw embeddings.
    pub fn init<R: Rng>(d_q: usize, heads: [usize; 2], slope: f64, noise: f64, rng: &mut R) -> Result<Self> {
        if heads.contains(&0) {
            return Err(Error::InvalidArgument("GAT head counts must be positive".into()));
        }
        if d_q % heads[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_q ({d_q}) must be divisible by the layer-1 head count ({})",
                heads[0]
            )));
        }
        let per_head = d_q / heads[0];
        let att_bound = 1.0 / (per_head as f64).sqrt();
        let mut jitter = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.gen_range(-noise..=noise));
        let mut l1 = Vec::with_capacity(heads[0]);
        for h in 0..heads[0] {
            let mut w = jitter((per_head, d_q));
            for r in 0..per_head {
                w[[r, h * per_head + r]] += 1.0;
            }
            l1.push(w);
        }
        let mut l2 = Vec::with_capacity(heads[1]);
        for _ in 0..heads[1] {
            l2.push(jitter((d_q, d_q)) + Array2::<f64>::eye(d_q));
        }
        let mut attn = |d: usize| -> Array1<f64> { (0..d).map(|_| rng.gen_range(-att_bound..=att_bound) * 0.1).collect() };
        let layer = |ws: Vec<Array2<f64>>, combine, elu, attn: &mut dyn FnMut(usize) -> Array1<f64>| GatLayer {
            heads: ws
                .into_iter()
                .map(|w| {
                    let d = w.nrows();
                    GatHead {
                        w,
                        a_self: attn(d),
                        a_neigh: attn(d),
                    }
                })
                .collect(),
            combine,
            elu,
        };
        Ok(Self {
            layers: vec![layer(l1, Combine::Concat, true, &mut attn), layer(l2, Combine::Mean, false, &mut attn)],
            slope,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|x| x.fill(0.0));
        z
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, GatLayer::out_dim)
    }

    /// Visits every parameter block in a fixed order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                f(head.w.as_slice_mut().expect("standard layout"));
                f(head.a_self.as_slice_mut().expect("standard layout"));
                f(head.a_neigh.as_slice_mut().expect("standard layout"));
            }
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.push(head.w.as_slice().expect("standard layout"));
                out.push(head.a_self.as_slice().expect("standard layout"));
                out.push(head.a_neigh.as_slice().expect("standard layout"));
            }
        }
        out
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GatParams, factor: f64) {
        let others = other.blocks();
        let mut k = 0;
        self.for_each_mut(|dst| {
            for (d, s) in dst.iter_mut().zip(others[k]) {
                *d += factor * s;
            }
            k += 1;
        });
    }

    pub fn sum_squares(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadCache {
    z: Array2<f64>,
    /// Per node: pre-rectifier logits and attention over `[i] ++ neighbours`.
    pre: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    input: Array2<f64>,
    heads: Vec<HeadCache>,
    /// Combined head output before the optional nonlinearity.
    combined: Array2<f64>,
}

/// Forward state needed by [`gat_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct GatForward {
    pub output: Array2<f64>,
    layers: Vec<LayerCache>,
    neighborhoods: Vec<Vec<usize>>,
}

impl GatForward {
    /// Attention rows of one head, aligned with [`GatForward::neighborhood`].
    pub fn attention(&self, layer: usize, head: usize) -> &[Vec<f64>] {
        &self.layers[layer].heads[head].alpha
    }

    /// `[i]` followed by the neighbours of `i`.
    pub fn neighborhood(&self, node: usize) -> &[usize] {
        &self.neighborhoods[node]
    }
}

fn head_forward(head: &GatHead, x: &Array2<f64>, hoods: &[Vec<usize>], slope: f64) -> (Array2<f64>, HeadCache) {
    let z = x.dot(&head.w.t());
    let s_self = z.dot(&head.a_self);
    let s_neigh = z.dot(&head.a_neigh);
    let mut out = Array2::zeros(z.dim());
    let mut pre_all = Vec::with_capacity(hoods.len());
    let mut alpha_all = Vec::with_capacity(hoods.len());
    for (i, hood) in hoods.iter().enumerate() {
        let pre: Vec<f64> = hood.iter().map(|&j| s_self[i] + s_neigh[j]).collect();
        let logits: Vec<f64> = pre.iter().map(|&p| leaky_relu(p, slope)).collect();
        let alpha = softmax(&logits);
        let mut row = out.row_mut(i);
        for (&j, &a) in hood.iter().zip(&alpha) {
            row.scaled_add(a, &z.row(j));
        }
        pre_all.push(pre);
        alpha_all.push(alpha);
    }
    (
        out,
        HeadCache {
            z,
            pre: pre_all,
            alpha: alpha_all,
        },
    )
}

/// Two-layer GAT with self-loops over `sub`; `x` holds one input row per node.
pub fn gat_forward(sub: &SubGraph, x: &Array2<f64>, params: &GatParams) -> Result<GatForward> {
    if x.nrows() != sub.len() {
        return Err(Error::DimensionMismatch {
            expected: sub.len(),
            got: x.nrows(),
        });
    }
    let hoods: Vec<Vec<usize>> = sub
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, ns)| std::iter::once(i).chain(ns.iter().copied()).collect())
        .collect();
    let mut input = x.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let in_dim = layer.heads[0].w.ncols();
        if input.ncols() != in_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim,
                got: input.ncols(),
            });
        }
        let parts: Vec<(Array2<f64>, HeadCache)> = layer
            .heads
            .iter()
            .map(|h| head_forward(h, &input, &hoods, params.slope))
            .collect();
        let combined = match layer.combine {
            Combine::Concat => {
                let views: Vec<_> = parts.iter().map(|(o, _)| o.view()).collect();
                ndarray::concatenate(Axis(1), &views).expect("equal row counts")
            }
            Combine::Mean => {
                let mut acc = Array2::zeros(parts[0].0.dim());
                for (o, _) in &parts {
                    acc += o;
                }
                acc / parts.len() as f64
            }
        };
        let output = if layer.elu { combined.mapv(elu) } else { combined.clone() };
        caches.push(LayerCache {
            input: std::mem::replace(&mut input, output),
            heads: parts.into_iter().map(|(_, c)| c).collect(),
            combined,
        });
    }
    Ok(GatForward {
        output: input,
        layers: caches,
        neighborhoods: hoods,
    })
}

fn head_backward(head: &GatHead, cache: &HeadCache, x: &Array2<f64>, hoods: &[Vec<usize>], slope: f64, d_out: &Array2<f64>, grad: &mut GatHead) -> Array2<f64> {
    let z = &cache.z;
    let mut dz = Array2::<f64>::zeros(z.dim());
    let n = hoods.len();
    let mut ds_self = Array1::<f64>::zeros(n);
    let mut ds_neigh = Array1::<f64>::zeros(n);
    for (i, hood) in hoods.iter().enumerate() {
        let dh = d_out.row(i);
        let alpha = &cache.alpha[i];
        let d_alpha: Vec<f64> = hood.iter().map(|&j| dh.dot(&z.row(j))).collect();
        for (&j, &a) in hood.iter().zip(alpha) {
            dz.row_mut(j).scaled_add(a, &dh);
        }
        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        for (k, &j) in hood.iter().enumerate() {
            let d_pre = alpha[k] * (d_alpha[k] - mean) * leaky_relu_grad(cache.pre[i][k], slope);
            ds_self[i] += d_pre;
            ds_neigh[j] += d_pre;
        }
    }
    grad.a_self += &z.t().dot(&ds_self);
    grad.a_neigh += &z.t().dot(&ds_neigh);
    for i in 0..n {
        dz.row_mut(i).scaled_add(ds_self[i], &head.a_self);
        dz.row_mut(i).scaled_add(ds_neigh[i], &head.a_neigh);
    }
    grad.w += &dz.t().dot(x);
    dz.dot(&head.w)
}

/// Accumulates `dL/dθ` into `grads` given `dL/d output`; returns `dL/dx`.
pub fn gat_backward(forward: &GatForward, params: &GatParams, d_output: &Array2<f64>, grads: &mut GatParams) -> Array2<f64> {
    let mut d = d_output.clone();
    for (l, (layer, cache)) in params.layers.iter().zip(&forward.layers).enumerate().rev() {
        let d_combined = if layer.elu {
            &d * &cache.combined.mapv(elu_grad)
        } else {
            d
        };
        let mut d_input = Array2::zeros(cache.input.dim());
        let heads = layer.heads.len();
        for (h, (head, hc)) in layer.heads.iter().zip(&cache.heads).enumerate() {
            let width = head.w.nrows();
            let d_head = match layer.combine {
                Combine::Concat => d_combined.slice(s![.., h * width..(h + 1) * width]).to_owned(),
                Combine::Mean => &d_combined / heads as f64,
            };
            let g = &mut grads.layers[l].heads[h];
            d_input += &head_backward(head, hc, &cache.input, &forward.neighborhoods, params.slope, &d_head, g);
        }
        d = d_input;
    }
    d
}

/// Explorer scores over every subgraph node and the selected top-`n_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explored {
    pub logits: Vec<f64>,
    /// `S_a`, a softmax over all nodes.
    pub scores: Vec<f64>,
    /// `(local node, S_a)`, best first, ties by ascending corpus index.
    pub selected: Vec<(usize, f64)>,
}

pub fn score_and_select(v_q: &Array1<f64>, sub: &SubGraph, updated: &Array2<f64>, n_2: usize) -> Result<Explored> {
    if n_2 < 1 {
        return Err(Error::InvalidArgument("n_2 must be at least 1".into()));
    }
    if updated.ncols() != v_q.len() {
        return Err(Error::DimensionMismatch {
            expected: v_q.len(),
            got: updated.ncols(),
        });
    }
    let logits: Vec<f64> = updated.dot(v_q).to_vec();
    let scores = softmax(&logits);
    let mut order: Vec<usize> = (0..sub.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(logits[b].total_cmp(&logits[a]))
            .then(sub.nodes[a].cmp(&sub.nodes[b]))
    });
    let selected = order.into_iter().take(n_2).map(|i| (i, scores[i])).collect();
    Ok(Explored { logits, scores, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> HyperlinkGraph {
        HyperlinkGraph::from_edges(3, [(0, 1), (1, 2)])
    }

    #[test]
    fn seed_union_and_dedup() {
        let s = SeedSet::new([], [0], [1]);
        assert_eq!(s.union().into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(s.from_answers.is_empty());
        let s = SeedSet::new([2], [2], [2]);
        assert_eq!(s.union().len(), 1);
    }

    #[test]
    fn expansion_on_chain() {
        let g = chain();
        let seed = SeedSet::new([], [0], []);
        let sub0 = expand(&seed, &g, 0, 512);
        assert_eq!(sub0.nodes, vec![0]);
        let sub = expand(&seed, &g, 2, 512);
        assert_eq!(sub.nodes, vec![0, 1, 2]);
        assert_eq!(sub.hops, vec![0, 1, 2]);
        assert_eq!(sub.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn cap_admits_by_hop_then_index_and_keeps_seeds() {
        let g = HyperlinkGraph::from_edges(6, [(0, 3), (0, 2), (0, 5), (1, 4)]);
        let seed = SeedSet::new([0], [1], []);
        let sub = expand(&seed, &g, 1, 4);
        assert_eq!(sub.nodes, vec![0, 1, 2, 3]);
        let tiny = expand(&seed, &g, 1, 1);
        assert_eq!(tiny.nodes, vec![0, 1]);
    }

    fn random_params(d: usize, seed: u64) -> GatParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GatParams::init(d, [2, 2], 0.2, 0.3, &mut rng).unwrap();
        p.for_each_mut(|b| b.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5)));
        p
    }

    fn random_x(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn five_node_sub() -> SubGraph {
        let g = HyperlinkGraph::from_edges(5, [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)]);
        expand(&SeedSet::new([], [0, 1, 2, 3, 4], []), &g, 0, 512)
    }

    /// Dense masked-attention GAT, written independently of the sparse one.
    fn dense_oracle(adj: &Array2<f64>, x: &Array2<f64>, p: &GatParams) -> Array2<f64> {
        let n = x.nrows();
        let mut h = x.clone();
        for layer in &p.layers {
            let mut outs = Vec::new();
            for head in &layer.heads {
                let z = h.dot(&head.w.t());
                let mut e = Array2::from_elem((n, n), f64::NEG_INFINITY);
                for i in 0..n {
                    for j in 0..n {
                        if i == j || adj[[i, j]] > 0.0 {
                            let v = head.a_self.dot(&z.row(i)) + head.a_neigh.dot(&z.row(j));
                            e[[i, j]] = if v > 0.0 { v } else { p.slope * v };
                        }
                    }
                }
                let mut out = Array2::zeros(z.dim());
                for i in 0..n {
                    let m = e.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let w: Vec<f64> = e.row(i).iter().map(|&v| (v - m).exp()).collect();
                    let total: f64 = w.iter().sum();
                    for j in 0..n {
                        out.row_mut(i).scaled_add(w[j] / total, &z.row(j));
                    }
                }
                outs.push(out);
            }
            let combined = match layer.combine {
                Combine::Concat => {
                    let v: Vec<_> = outs.iter().map(|o| o.view()).collect();
                    ndarray::concatenate(Axis(1), &v).unwrap()
                }
                Combine::Mean => outs.iter().fold(Array2::zeros(outs[0].dim()), |a, o| a + o) / outs.len() as f64,
            };
            h = if layer.elu {
                combined.mapv(|v| if v > 0.0 { v } else { v.exp() - 1.0 })
            } else {
                combined
            };
        }
        h
    }

    #[test]
    fn sparse_gat_matches_dense_oracle() {
        let sub = five_node_sub();
        let mut adj = Array2::zeros((5, 5));
        for (a, b) in sub.edges() {
            adj[[a, b]] = 1.0;
            adj[[b, a]] = 1.0;
        }
        let p = random_params(8, 4);
        let x = random_x(5, 8, 9);
        let got = gat_forward(&sub, &x, &p).unwrap().output;
        let want = dense_oracle(&adj, &x, &p);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_identity_node_passes_through_nonlinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GatParams::init(4, [2, 2], 0.2, 0.0, &mut rng).unwrap();
        let g = HyperlinkGraph::from_edges(1, []);
        let sub = expand(&SeedSet::new([], [0], []), &g, 1, 512);
        let x = Array2::from_shape_vec((1, 4), vec![0.5, -1.0, 2.0, -0.1]).unwrap();
        let f = gat_forward(&sub, &x, &p).unwrap();
        assert_eq!(f.attention(0, 0)[0], vec![1.0]);
        let expected = x.mapv(elu);
        for (a, b) in f.output.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_gives_identical_outputs() {
        let g = HyperlinkGraph::from_edges(2, [(0, 1)]);
        let sub = expand(&SeedSet::new([], [0, 1], []), &g, 0, 512);
        let row: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1];
        let x = Array2::from_shape_fn((2, 4), |(_, c)| row[c]);
        let out = gat_forward(&sub, &x, &random_params(4, 2)).unwrap().output;
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn isolated_node_is_unaffected_by_others() {
        let g = HyperlinkGraph::from_edges(4, [(0, 1), (1, 2)]);
        let sub = expand(&SeedSet::new([], [0, 1, 2, 3], []), &g, 0, 512);
        let p = random_params(6, 8);
        let mut x = random_x(4, 6, 1);
        let before = gat_forward(&sub, &x, &p).unwrap().output.row(3).to_owned();
        for r in 0..3 {
            x.row_mut(r).mapv_inplace(|v| v * 3.0 - 1.0);
        }
        let after = gat_forward(&sub, &x, &p).unwrap().output.row(3).to_owned();
        assert_eq!(before, after);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let sub = five_node_sub();
        let p = random_params(4, 21);
        let x = random_x(5, 4, 22);
        let target = random_x(5, 4, 23);
        let loss = |p: &GatParams| (gat_forward(&sub, &x, p).unwrap().output * &target).sum();
        let f = gat_forward(&sub, &x, &p).unwrap();
        let mut grads = p.zeros_like();
        gat_backward(&f, &p, &target, &mut grads);
        let analytic: Vec<f64> = grads.blocks().concat();
        let eps = 1e-5;
        let n = analytic.len();
        for k in 0..n {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut idx = 0;
                q.for_each_mut(|b| {
                    for v in b.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
                loss(&q)
            };
            let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let a = analytic[k];
            assert!((num - a).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0), "param {k}: {a} vs {num}");
        }
    }

    #[test]
    fn scores_sum_to_one_and_ties_break_by_index() {
        let g = HyperlinkGraph::from_edges(2, []);
        let sub = expand(&SeedSet::new([], [0, 1], []), &g, 0, 512);
        let v = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e = score_and_select(&Array1::from(vec![1.0, 1.0]), &sub, &v, 1).unwrap();
        assert_eq!(e.scores, vec![0.5, 0.5]);
        assert_eq!(e.selected, vec![(0, 0.5)]);
        assert!(score_and_select(&Array1::from(vec![1.0, 1.0]), &sub, &v, 0).is_err());
        let one = expand(&SeedSet::new([], [0], []), &g, 0, 512);
        let e = score_and_select(&Array1::from(vec![1.0, 1.0]), &one, &v.slice(s![0..1, ..]).to_owned(), 5).unwrap();
        assert_eq!(e.scores, vec![1.0]);
    }

    #[test]
    fn ranking_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = HyperlinkGraph::from_edges(20, []);
        let sub = expand(&SeedSet::new([], 0..20, []), &g, 0, 512);
        let v = random_x(20, 5, 78);
        let q: Array1<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = score_and_select(&q, &sub, &v, 5).unwrap();
        let raw: Vec<f64> = (0..20).map(|i| v.row(i).dot(&q)).collect();
        let z: f64 = raw.iter().map(|r| r.exp()).sum();
        let mut oracle: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, r)| (i, r.exp() / z)).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for ((gi, gs), (oi, os)) in e.selected.iter().zip(&oracle) {
            assert_eq!(gi, oi);
            assert!((gs - os).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_vector_names_the_node() {
        use crate::corpus::{Corpus, PassageRecord};
        let recs = vec![
            PassageRecord { id: "A".into(), title: String::new(), text: "a".into(), out_links: vec!["B".into()] },
            PassageRecord { id: "B".into(), title: String::new(), text: "b".into(), out_links: vec![] },
        ];
        let (corpus, _) = Corpus::from_passages(recs).unwrap();
        let sub = expand(&SeedSet::new([], [0], []), corpus.graph(), 1, 512);
        let err = node_matrix(&sub, &corpus, 2, |i| (i == 0).then(|| Array1::zeros(2))).unwrap_err();
        assert!(matches!(err, Error::MissingNodeVector(ref id) if id == "B"));
    }
}
