//! Graph node embeddings via second-order biased random walks and skip-gram
//! with negative sampling.
//!
//! The walk bias follows the p/q rule: from `curr` with previous node `prev`,
//! a neighbor `x` is weighted edge_weight(curr,x) times 1/p if x = prev,
//! 1 if x is adjacent to prev, and 1/q otherwise; the first step uses raw
//! edge weights. Training maximizes log sigmoid(u_c . v_o) plus the
//! negative-sample terms, with negatives drawn from the unigram^0.75
//! distribution over walk occurrences.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graphs::WeightedGraph;
use crate::seeds::{derive_seed, split_seed};
use crate::vectors::VectorTable;

/// Node vectors keyed by namespaced token; same shape and file format as any
/// other vector table.
pub type NodeEmbeddings = VectorTable;

#[derive(Debug, Clone)]
pub struct WalkConfig {
    /// Return parameter: higher p discourages revisiting the previous node.
    pub p: f64,
    /// In-out parameter: higher q keeps walks local.
    pub q: f64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            p: 1.0,
            q: 1.0,
            walk_length: 40,
            walks_per_node: 10,
            seed: 0,
        }
    }
}

impl WalkConfig {
    fn validate(&self) -> Result<()> {
        if !(self.p > 0.0) || !(self.q > 0.0) {
            return Err(Error::invalid(format!(
                "walk bias parameters must be positive, got p={} q={}",
                self.p, self.q
            )));
        }
        if self.walk_length < 2 {
            return Err(Error::invalid(format!(
                "walk_length must be at least 2, got {}",
                self.walk_length
            )));
        }
        if self.walks_per_node < 1 {
            return Err(Error::invalid("walks_per_node must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgnsConfig {
    pub dim: usize,
    pub context_window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Linear-decay floor for the learning rate.
    pub final_learning_rate: f64,
    pub seed: u64,
    /// 1 = sequential and bit-reproducible; >1 = unsynchronized parallel
    /// updates (fast, non-deterministic).
    pub workers: usize,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 100,
            context_window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            final_learning_rate: 1e-4,
            seed: 0,
            workers: 1,
        }
    }
}

/// Exponent applied to unigram counts for negative sampling.
pub const NEGATIVE_POWER: f64 = 0.75;

/// Adjacency-indexed graph for walking. Node order is the sorted token order.
pub struct WalkGraph {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Per node: (neighbor index, edge weight), sorted by neighbor index.
    adj: Vec<Vec<(u32, f64)>>,
}

impl WalkGraph {
    pub fn from_graph(graph: &WeightedGraph) -> WalkGraph {
        let tokens: Vec<String> = graph.nodes().map(|s| s.to_string()).collect();
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut adj = vec![Vec::new(); tokens.len()];
        for (a, b, w) in graph.edges() {
            let (ia, ib) = (index[a], index[b]);
            adj[ia as usize].push((ib, w as f64));
            adj[ib as usize].push((ia, w as f64));
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|(i, _)| *i);
        }
        WalkGraph { tokens, index, adj }
    }

    /// Build from explicit parts; `nodes` may include isolated nodes that no
    /// edge touches.
    pub fn from_parts(nodes: &[&str], edges: &[(&str, &str, f64)]) -> Result<WalkGraph> {
        let mut tokens: Vec<String> = nodes.iter().map(|s| s.to_string()).collect();
        tokens.sort();
        tokens.dedup();
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut adj = vec![Vec::new(); tokens.len()];
        for (a, b, w) in edges {
            if a == b {
                return Err(Error::invalid(format!("self-loop on {a:?}")));
            }
            if !(*w > 0.0) {
                return Err(Error::invalid(format!("non-positive weight on {a:?}-{b:?}")));
            }
            let ia = *index
                .get(*a)
                .ok_or_else(|| Error::invalid(format!("edge endpoint {a:?} not in node list")))?;
            let ib = *index
                .get(*b)
                .ok_or_else(|| Error::invalid(format!("edge endpoint {b:?} not in node list")))?;
            adj[ia as usize].push((ib, *w));
            adj[ib as usize].push((ia, *w));
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|(i, _)| *i);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::invalid("duplicate edge"));
            }
        }
        Ok(WalkGraph { tokens, index, adj })
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn neighbors(&self, node: u32) -> &[(u32, f64)] {
        &self.adj[node as usize]
    }

    fn has_edge(&self, a: u32, b: u32) -> bool {
        self.adj[a as usize]
            .binary_search_by_key(&b, |(i, _)| *i)
            .is_ok()
    }
}

/// Fill `buf` with the unnormalized transition weight for each neighbor of
/// `curr`, aligned with the adjacency list.
fn step_weights(graph: &WalkGraph, prev: Option<u32>, curr: u32, p: f64, q: f64, buf: &mut Vec<f64>) {
    buf.clear();
    match prev {
        None => buf.extend(graph.neighbors(curr).iter().map(|(_, w)| *w)),
        Some(prev) => {
            for (x, w) in graph.neighbors(curr) {
                let alpha = if *x == prev {
                    1.0 / p
                } else if graph.has_edge(*x, prev) {
                    1.0
                } else {
                    1.0 / q
                };
                buf.push(w * alpha);
            }
        }
    }
}

/// Unnormalized transition weights from `curr`, given the optional previous
/// node. Empty map for an isolated node.
pub fn transition_weights(
    graph: &WalkGraph,
    prev: Option<&str>,
    curr: &str,
    cfg: &WalkConfig,
) -> Result<BTreeMap<String, f64>> {
    cfg.validate()?;
    let curr_idx = graph
        .index_of(curr)
        .ok_or_else(|| Error::invalid(format!("node {curr:?} not in graph")))?;
    let prev_idx = match prev {
        None => None,
        Some(tok) => {
            let idx = graph
                .index_of(tok)
                .ok_or_else(|| Error::invalid(format!("node {tok:?} not in graph")))?;
            if !graph.has_edge(idx, curr_idx) {
                return Err(Error::invalid(format!(
                    "previous node {tok:?} is not adjacent to {curr:?}"
                )));
            }
            Some(idx)
        }
    };
    let mut buf = Vec::new();
    step_weights(graph, prev_idx, curr_idx, cfg.p, cfg.q, &mut buf);
    Ok(graph
        .neighbors(curr_idx)
        .iter()
        .zip(&buf)
        .map(|((x, _), w)| (graph.tokens[*x as usize].clone(), *w))
        .collect())
}

/// Walks stored as node indices into `tokens`.
pub struct WalkSet {
    tokens: Vec<String>,
    walks: Vec<Vec<u32>>,
}

impl WalkSet {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn walks(&self) -> &[Vec<u32>] {
        &self.walks
    }

    pub fn len(&self) -> usize {
        self.walks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walks.is_empty()
    }

    pub fn walk_tokens(&self, i: usize) -> Vec<&str> {
        self.walks[i]
            .iter()
            .map(|&n| self.tokens[n as usize].as_str())
            .collect()
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let r = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if r < cum {
            return i;
        }
    }
    weights.len() - 1
}

/// `walks_per_node` biased walks from every node, in node order. Walk g for
/// global index g = node_index * walks_per_node + repeat uses the RNG seeded
/// with split_seed(derive_seed(cfg.seed, "walks"), g), so results do not
/// depend on thread count.
pub fn generate_walks(graph: &WalkGraph, cfg: &WalkConfig) -> Result<WalkSet> {
    cfg.validate()?;
    if graph.node_count() == 0 {
        return Err(Error::invalid("cannot walk an empty graph"));
    }
    let base = derive_seed(cfg.seed, "walks");
    let n = graph.node_count();
    let walks: Vec<Vec<u32>> = (0..n as u32)
        .into_par_iter()
        .flat_map_iter(|start| {
            (0..cfg.walks_per_node).map(move |repeat| {
                let global = start as u64 * cfg.walks_per_node as u64 + repeat as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(split_seed(base, global));
                let mut walk = Vec::with_capacity(cfg.walk_length);
                walk.push(start);
                let mut prev: Option<u32> = None;
                let mut buf = Vec::new();
                while walk.len() < cfg.walk_length {
                    let curr = *walk.last().expect("walk is non-empty");
                    let neighbors = graph.neighbors(curr);
                    if neighbors.is_empty() {
                        break;
                    }
                    step_weights(graph, prev, curr, cfg.p, cfg.q, &mut buf);
                    let next = neighbors[sample_index(&buf, &mut rng)].0;
                    prev = Some(curr);
                    walk.push(next);
                }
                walk
            })
        })
        .collect();
    Ok(WalkSet {
        tokens: graph.tokens().to_vec(),
        walks,
    })
}

/// Cumulative-sum sampler over `counts[i]^power`.
pub struct UnigramSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl UnigramSampler {
    pub fn new(counts: &[u64], power: f64) -> Result<UnigramSampler> {
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut total = 0.0;
        for &c in counts {
            total += (c as f64).powf(power);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::invalid("unigram sampler needs a positive total count"));
        }
        Ok(UnigramSampler { cumulative, total })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let r = rng.random::<f64>() * self.total;
        let idx = self.cumulative.partition_point(|&c| c <= r);
        idx.min(self.cumulative.len() - 1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log sigmoid(x), stable for large |x|.
fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Loss of one center/context pair with the given negative rows:
/// -ln sigmoid(u_c . v_o) - sum_n ln sigmoid(-(u_c . v_n)).
/// `input` and `output` are row-major n x dim matrices.
pub fn pair_loss(
    input: &[f64],
    output: &[f64],
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[usize],
) -> f64 {
    let u = &input[center * dim..(center + 1) * dim];
    let v = &output[context * dim..(context + 1) * dim];
    let mut loss = -ln_sigmoid(dot(u, v));
    for &neg in negatives {
        let vn = &output[neg * dim..(neg + 1) * dim];
        loss -= ln_sigmoid(-dot(u, vn));
    }
    loss
}

#[derive(Debug, Clone)]
pub struct PairGrads {
    pub d_center: Vec<f64>,
    pub d_context: Vec<f64>,
    /// One gradient per entry of `negatives`, in order.
    pub d_negatives: Vec<Vec<f64>>,
}

/// Analytic gradients of [`pair_loss`] with respect to the center input row,
/// the context output row, and each negative output row.
pub fn pair_grads(
    input: &[f64],
    output: &[f64],
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[usize],
) -> PairGrads {
    let u = &input[center * dim..(center + 1) * dim];
    let v = &output[context * dim..(context + 1) * dim];
    let g_pos = sigmoid(dot(u, v)) - 1.0;
    let mut d_center: Vec<f64> = v.iter().map(|&x| g_pos * x).collect();
    let d_context: Vec<f64> = u.iter().map(|&x| g_pos * x).collect();
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for &neg in negatives {
        let vn = &output[neg * dim..(neg + 1) * dim];
        let g_neg = sigmoid(dot(u, vn));
        for (dc, &x) in d_center.iter_mut().zip(vn) {
            *dc += g_neg * x;
        }
        d_negatives.push(u.iter().map(|&x| g_neg * x).collect());
    }
    PairGrads {
        d_center,
        d_context,
        d_negatives,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// One SGD step on a pair: updates the context and negative output rows and
/// the center input row in place, returning the pre-update loss. The center
/// row update uses the pre-step output rows, as in the reference skip-gram
/// recursion.
pub fn sgd_step_pair(
    input: &mut [f64],
    output: &mut [f64],
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
) -> f64 {
    let u: Vec<f64> = input[center * dim..(center + 1) * dim].to_vec();
    let mut du = vec![0.0; dim];
    let mut loss;
    {
        let v = &mut output[context * dim..(context + 1) * dim];
        let x = dot(&u, v);
        loss = -ln_sigmoid(x);
        let g = sigmoid(x) - 1.0;
        for d in 0..dim {
            du[d] += g * v[d];
            v[d] -= lr * g * u[d];
        }
    }
    for &neg in negatives {
        let v = &mut output[neg * dim..(neg + 1) * dim];
        let x = dot(&u, v);
        loss -= ln_sigmoid(-x);
        let g = sigmoid(x);
        for d in 0..dim {
            du[d] += g * v[d];
            v[d] -= lr * g * u[d];
        }
    }
    for d in 0..dim {
        input[center * dim + d] -= lr * du[d];
    }
    loss
}

/// Same step over shared atomic storage; bitwise-identical to
/// [`sgd_step_pair`] when no other thread interferes.
fn sgd_step_pair_atomic(
    input: &[AtomicU64],
    output: &[AtomicU64],
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
) -> f64 {
    let load = |cell: &AtomicU64| f64::from_bits(cell.load(Ordering::Relaxed));
    let store = |cell: &AtomicU64, v: f64| cell.store(v.to_bits(), Ordering::Relaxed);
    let u: Vec<f64> = (0..dim)
        .map(|d| load(&input[center * dim + d]))
        .collect();
    let mut du = vec![0.0; dim];
    let mut loss;
    {
        let row = &output[context * dim..(context + 1) * dim];
        let mut x = 0.0;
        let v: Vec<f64> = row.iter().map(load).collect();
        for d in 0..dim {
            x += u[d] * v[d];
        }
        loss = -ln_sigmoid(x);
        let g = sigmoid(x) - 1.0;
        for d in 0..dim {
            du[d] += g * v[d];
            store(&row[d], v[d] - lr * g * u[d]);
        }
    }
    for &neg in negatives {
        let row = &output[neg * dim..(neg + 1) * dim];
        let v: Vec<f64> = row.iter().map(load).collect();
        let mut x = 0.0;
        for d in 0..dim {
            x += u[d] * v[d];
        }
        loss -= ln_sigmoid(-x);
        let g = sigmoid(x);
        for d in 0..dim {
            du[d] += g * v[d];
            store(&row[d], v[d] - lr * g * u[d]);
        }
    }
    for d in 0..dim {
        let cell = &input[center * dim + d];
        store(cell, load(cell) - lr * du[d]);
    }
    loss
}

pub struct SgnsResult {
    pub embeddings: NodeEmbeddings,
    /// Mean per-pair loss of each epoch, measured before each update. Empty
    /// when the walks contain no trainable pairs.
    pub epoch_losses: Vec<f64>,
}

fn walk_pair_count(len: usize, cw: usize) -> u64 {
    let mut pairs = 0u64;
    for t in 0..len {
        let lo = t.saturating_sub(cw);
        let hi = (t + cw).min(len.saturating_sub(1));
        pairs += (hi - lo) as u64;
    }
    pairs
}

/// Skip-gram training over the walk corpus.
///
/// Deterministic contract (workers = 1): both matrices are initialized
/// uniformly in [-0.5/dim, 0.5/dim] from ChaCha8 seeded with
/// derive_seed(seed, "sgns-init"), input rows first; walks are visited in
/// order within each epoch; pairs are (center t, context c) for c from t-cw
/// to t+cw, c != t, left to right; negatives come from a unigram^0.75
/// sampler over walk occurrences, drawn from ChaCha8 seeded with
/// split_seed(derive_seed(seed, "sgns-neg"), epoch * walk_count + walk),
/// draws equal to the context are dropped; the learning rate is constant
/// within a walk, linearly decayed from learning_rate to final_learning_rate
/// by the fraction of pairs completed before the walk. With workers > 1 the
/// same walks update shared rows without synchronization, so results vary
/// run to run.
pub fn train_sgns(walks: &WalkSet, cfg: &SgnsConfig) -> Result<SgnsResult> {
    if cfg.dim == 0 {
        return Err(Error::invalid("embedding dim must be positive"));
    }
    if cfg.context_window == 0 || cfg.negatives == 0 || cfg.epochs == 0 {
        return Err(Error::invalid(
            "context_window, negatives, and epochs must all be positive",
        ));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.final_learning_rate > 0.0) {
        return Err(Error::invalid("learning rates must be positive"));
    }
    if walks.is_empty() || walks.tokens().is_empty() {
        return Err(Error::invalid("cannot train on an empty walk set"));
    }
    let n = walks.tokens().len();
    let dim = cfg.dim;

    let mut counts = vec![0u64; n];
    for walk in walks.walks() {
        for &node in walk {
            counts[node as usize] += 1;
        }
    }
    let sampler = UnigramSampler::new(&counts, NEGATIVE_POWER)?;

    let init_seed = derive_seed(cfg.seed, "sgns-init");
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let bound = 0.5 / dim as f64;
    let mut init = |len: usize| -> Vec<AtomicU64> {
        (0..len)
            .map(|_| AtomicU64::new(rng.random_range(-bound..bound).to_bits()))
            .collect()
    };
    let input = init(n * dim);
    let output = init(n * dim);

    let per_walk_pairs: Vec<u64> = walks
        .walks()
        .iter()
        .map(|w| walk_pair_count(w.len(), cfg.context_window))
        .collect();
    let mut pairs_before: Vec<u64> = Vec::with_capacity(per_walk_pairs.len());
    let mut acc = 0u64;
    for &p in &per_walk_pairs {
        pairs_before.push(acc);
        acc += p;
    }
    let pairs_per_epoch = acc;
    let total_pairs = pairs_per_epoch * cfg.epochs as u64;
    if total_pairs == 0 {
        return Ok(SgnsResult {
            embeddings: collect_embeddings(walks.tokens(), &input, dim),
            epoch_losses: Vec::new(),
        });
    }

    let neg_base = derive_seed(cfg.seed, "sgns-neg");
    let walk_count = walks.len() as u64;
    let train_walk = |epoch: usize, w_idx: usize, walk: &[u32]| -> f64 {
        let done = epoch as u64 * pairs_per_epoch + pairs_before[w_idx];
        let progress = done as f64 / total_pairs as f64;
        let lr = cfg.learning_rate
            + (cfg.final_learning_rate - cfg.learning_rate) * progress;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(
            neg_base,
            epoch as u64 * walk_count + w_idx as u64,
        ));
        let mut loss = 0.0;
        let mut negs: Vec<usize> = Vec::with_capacity(cfg.negatives);
        for t in 0..walk.len() {
            let center = walk[t] as usize;
            let lo = t.saturating_sub(cfg.context_window);
            let hi = (t + cfg.context_window).min(walk.len() - 1);
            for c in lo..=hi {
                if c == t {
                    continue;
                }
                let context = walk[c] as usize;
                negs.clear();
                for _ in 0..cfg.negatives {
                    let s = sampler.sample(&mut rng);
                    if s != context {
                        negs.push(s);
                    }
                }
                loss += sgd_step_pair_atomic(&input, &output, dim, center, context, &negs, lr);
            }
        }
        loss
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss_sum: f64 = if cfg.workers <= 1 {
            walks
                .walks()
                .iter()
                .enumerate()
                .map(|(w_idx, walk)| train_walk(epoch, w_idx, walk))
                .sum()
        } else {
            walks
                .walks()
                .par_iter()
                .enumerate()
                .map(|(w_idx, walk)| train_walk(epoch, w_idx, walk))
                .sum()
        };
        epoch_losses.push(loss_sum / pairs_per_epoch as f64);
    }

    Ok(SgnsResult {
        embeddings: collect_embeddings(walks.tokens(), &input, dim),
        epoch_losses,
    })
}

fn collect_embeddings(tokens: &[String], input: &[AtomicU64], dim: usize) -> NodeEmbeddings {
    let mut table = VectorTable::new(dim);
    for (i, token) in tokens.iter().enumerate() {
        let row: Vec<f32> = (0..dim)
            .map(|d| f64::from_bits(input[i * dim + d].load(Ordering::Relaxed)) as f32)
            .collect();
        table
            .insert(token.as_str(), row)
            .expect("training produces finite uniform-dim rows");
    }
    table
}
