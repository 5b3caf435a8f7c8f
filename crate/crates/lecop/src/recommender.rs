//! User model over fused news vectors: multi-head self-attention across the
//! clicked-news sequence, additive attention pooling into one user vector,
//! and dot-product candidate scoring, trained with sampled softmax (one
//! clicked candidate against K sampled non-clicked ones) under Adam.
//!
//! All model math is f64. Gradients are accumulated per fixed-size group
//! chunk and the chunks are reduced in index order, so results do not depend
//! on how many threads the ambient rayon pool has.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{LlmCoverage, ProjectionParams};
use crate::ingest::Impression;
use crate::metrics::{self, MetricsReport};
use crate::seeds::{derive_seed, split_seed};
use crate::vectors::VectorTable;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Groups per gradient chunk. Fixed (not tied to thread count) so the
/// reduction order and therefore the trained parameters are identical for
/// any pool size.
const GRAD_CHUNK: usize = 64;

/// Self-attention and pooling parameters. The stacked per-head query/key/
/// value maps form one (heads*head_dim) x d_out matrix each, with head `k`
/// owning rows [k*head_dim, (k+1)*head_dim). heads*head_dim must equal
/// d_out, so these matrices are square.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEncoderParams {
    heads: usize,
    head_dim: usize,
    d_a: usize,
    query: Vec<f64>,
    key: Vec<f64>,
    value: Vec<f64>,
    /// d_a x d_out.
    attn_proj: Vec<f64>,
    /// d_a.
    attn_query: Vec<f64>,
}

impl UserEncoderParams {
    /// Seeded Glorot-uniform initialization. Draw order is fixed: query,
    /// key, value (row-major), then attn_proj, then attn_query.
    pub fn init(heads: usize, head_dim: usize, d_a: usize, seed: u64) -> Self {
        let d_out = heads * head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder-init"));
        let mut draw = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let square = d_out * d_out;
        UserEncoderParams {
            heads,
            head_dim,
            d_a,
            query: draw(square, d_out, head_dim),
            key: draw(square, d_out, head_dim),
            value: draw(square, d_out, head_dim),
            attn_proj: draw(d_a * d_out, d_out, d_a),
            attn_query: draw(d_a, d_a, 1),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        heads: usize,
        head_dim: usize,
        d_a: usize,
        query: Vec<f64>,
        key: Vec<f64>,
        value: Vec<f64>,
        attn_proj: Vec<f64>,
        attn_query: Vec<f64>,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || d_a == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        let d_out = heads * head_dim;
        let square = d_out * d_out;
        if query.len() != square || key.len() != square || value.len() != square {
            return Err(Error::invalid(format!(
                "attention tensors must have {square} elements"
            )));
        }
        if attn_proj.len() != d_a * d_out || attn_query.len() != d_a {
            return Err(Error::invalid("pooling tensor shape mismatch"));
        }
        let all = query
            .iter()
            .chain(&key)
            .chain(&value)
            .chain(&attn_proj)
            .chain(&attn_query);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("encoder contains non-finite values"));
        }
        Ok(UserEncoderParams {
            heads,
            head_dim,
            d_a,
            query,
            key,
            value,
            attn_proj,
            attn_query,
        })
    }

    pub fn d_out(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn key(&self) -> &[f64] {
        &self.key
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn attn_proj(&self) -> &[f64] {
        &self.attn_proj
    }

    pub fn attn_query(&self) -> &[f64] {
        &self.attn_query
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_history: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            negatives_per_positive: 4,
            batch_size: 512,
            learning_rate: 2e-4,
            epochs: 5,
            max_history: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_positive == 0 {
            return Err(Error::invalid("negatives_per_positive must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if self.max_history == 0 {
            return Err(Error::invalid("max_history must be at least 1"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out = M x for a row-major rows x cols matrix.
fn matvec(mat: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = dot(&mat[r * cols..(r + 1) * cols], x);
    }
}

/// out += M^T y.
fn matvec_t_add(mat: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        let row = &mat[r * cols..(r + 1) * cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * yr;
        }
    }
}

/// grad[r][c] += a[r] * b[c].
fn outer_add(grad: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (g, &bc) in row.iter_mut().zip(b) {
            *g += ar * bc;
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Forward intermediates kept for the backward pass. All row buffers are
/// flat with stride d_out (or d_a for `t`).
struct UserForward {
    len: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x len x len, rows already softmaxed.
    attn: Vec<f64>,
    /// Per-item self-attention outputs, heads concatenated.
    x: Vec<f64>,
    /// tanh(attn_proj . x_i).
    t: Vec<f64>,
    pool_w: Vec<f64>,
    user: Vec<f64>,
}

fn forward_user(hist: &[f64], len: usize, p: &UserEncoderParams) -> UserForward {
    let d_out = p.d_out();
    let (h, d, d_a) = (p.heads, p.head_dim, p.d_a);
    debug_assert_eq!(hist.len(), len * d_out);
    debug_assert!(len > 0);

    let mut q = vec![0.0; len * d_out];
    let mut k = vec![0.0; len * d_out];
    let mut v = vec![0.0; len * d_out];
    for i in 0..len {
        let n = &hist[i * d_out..(i + 1) * d_out];
        matvec(&p.query, d_out, d_out, n, &mut q[i * d_out..(i + 1) * d_out]);
        matvec(&p.key, d_out, d_out, n, &mut k[i * d_out..(i + 1) * d_out]);
        matvec(&p.value, d_out, d_out, n, &mut v[i * d_out..(i + 1) * d_out]);
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; h * len * len];
    for head in 0..h {
        let off = head * d;
        for i in 0..len {
            let qi = &q[i * d_out + off..i * d_out + off + d];
            let row = &mut attn[(head * len + i) * len..(head * len + i + 1) * len];
            for j in 0..len {
                let kj = &k[j * d_out + off..j * d_out + off + d];
                row[j] = scale * dot(qi, kj);
            }
            softmax_in_place(row);
        }
    }

    let mut x = vec![0.0; len * d_out];
    for head in 0..h {
        let off = head * d;
        for i in 0..len {
            let row = &attn[(head * len + i) * len..(head * len + i + 1) * len];
            for j in 0..len {
                let a = row[j];
                let vj = &v[j * d_out + off..j * d_out + off + d];
                let xi = &mut x[i * d_out + off..i * d_out + off + d];
                for r in 0..d {
                    xi[r] += a * vj[r];
                }
            }
        }
    }

    let mut t = vec![0.0; len * d_a];
    let mut pool_w = vec![0.0; len];
    for i in 0..len {
        let ti = &mut t[i * d_a..(i + 1) * d_a];
        matvec(&p.attn_proj, d_a, d_out, &x[i * d_out..(i + 1) * d_out], ti);
        let mut g = 0.0;
        for r in 0..d_a {
            ti[r] = ti[r].tanh();
            g += p.attn_query[r] * ti[r];
        }
        pool_w[i] = g;
    }
    softmax_in_place(&mut pool_w);

    let mut user = vec![0.0; d_out];
    for i in 0..len {
        let w = pool_w[i];
        for (u, &xv) in user.iter_mut().zip(&x[i * d_out..(i + 1) * d_out]) {
            *u += w * xv;
        }
    }

    UserForward {
        len,
        q,
        k,
        v,
        attn,
        x,
        t,
        pool_w,
        user,
    }
}

/// Accumulates encoder-parameter gradients into `grads` and input gradients
/// into `d_hist` (len x d_out), given the loss gradient `du` at the user
/// vector.
fn backward_user(
    p: &UserEncoderParams,
    hist: &[f64],
    fwd: &UserForward,
    du: &[f64],
    grads: &mut GradBuffers,
    d_hist: &mut [f64],
) {
    let d_out = p.d_out();
    let (h, d, d_a) = (p.heads, p.head_dim, p.d_a);
    let len = fwd.len;

    // Pooling: u = sum_i w_i x_i, w = softmax(g).
    let mut dx = vec![0.0; len * d_out];
    let mut dw = vec![0.0; len];
    for i in 0..len {
        let xi = &fwd.x[i * d_out..(i + 1) * d_out];
        dw[i] = dot(du, xi);
        let w = fwd.pool_w[i];
        for (dxv, &duv) in dx[i * d_out..(i + 1) * d_out].iter_mut().zip(du) {
            *dxv += w * duv;
        }
    }
    let inner: f64 = (0..len).map(|i| fwd.pool_w[i] * dw[i]).sum();
    let mut dz = vec![0.0; d_a];
    for i in 0..len {
        let dg = fwd.pool_w[i] * (dw[i] - inner);
        let ti = &fwd.t[i * d_a..(i + 1) * d_a];
        let xi = &fwd.x[i * d_out..(i + 1) * d_out];
        for r in 0..d_a {
            grads.attn_query[r] += dg * ti[r];
            dz[r] = dg * p.attn_query[r] * (1.0 - ti[r] * ti[r]);
        }
        outer_add(&mut grads.attn_proj, &dz, xi);
        matvec_t_add(
            &p.attn_proj,
            d_a,
            d_out,
            &dz,
            &mut dx[i * d_out..(i + 1) * d_out],
        );
    }

    // Self-attention.
    let mut dq = vec![0.0; len * d_out];
    let mut dk = vec![0.0; len * d_out];
    let mut dv = vec![0.0; len * d_out];
    let scale = 1.0 / (d as f64).sqrt();
    let mut da = vec![0.0; len];
    for head in 0..h {
        let off = head * d;
        for i in 0..len {
            let doi = &dx[i * d_out + off..i * d_out + off + d];
            let arow = &fwd.attn[(head * len + i) * len..(head * len + i + 1) * len];
            for j in 0..len {
                let vj = &fwd.v[j * d_out + off..j * d_out + off + d];
                da[j] = dot(doi, vj);
                let dvj = &mut dv[j * d_out + off..j * d_out + off + d];
                for r in 0..d {
                    dvj[r] += arow[j] * doi[r];
                }
            }
            let inner: f64 = (0..len).map(|j| arow[j] * da[j]).sum();
            for j in 0..len {
                let de = arow[j] * (da[j] - inner) * scale;
                let kj = &fwd.k[j * d_out + off..j * d_out + off + d];
                let qi = &fwd.q[i * d_out + off..i * d_out + off + d];
                let dqi = &mut dq[i * d_out + off..i * d_out + off + d];
                for r in 0..d {
                    dqi[r] += de * kj[r];
                }
                let dkj = &mut dk[j * d_out + off..j * d_out + off + d];
                for r in 0..d {
                    dkj[r] += de * qi[r];
                }
            }
        }
    }

    for i in 0..len {
        let n = &hist[i * d_out..(i + 1) * d_out];
        let dqi = &dq[i * d_out..(i + 1) * d_out];
        let dki = &dk[i * d_out..(i + 1) * d_out];
        let dvi = &dv[i * d_out..(i + 1) * d_out];
        outer_add(&mut grads.query, dqi, n);
        outer_add(&mut grads.key, dki, n);
        outer_add(&mut grads.value, dvi, n);
        let dn = &mut d_hist[i * d_out..(i + 1) * d_out];
        matvec_t_add(&p.query, d_out, d_out, dqi, dn);
        matvec_t_add(&p.key, d_out, d_out, dki, dn);
        matvec_t_add(&p.value, d_out, d_out, dvi, dn);
    }
}

/// Encode a click history into one user vector. An empty history maps to the
/// zero vector by convention.
pub fn encode_user(clicked: &[Vec<f64>], params: &UserEncoderParams) -> Result<Vec<f64>> {
    let d_out = params.d_out();
    if clicked.is_empty() {
        return Ok(vec![0.0; d_out]);
    }
    let mut hist = Vec::with_capacity(clicked.len() * d_out);
    for vec in clicked {
        if vec.len() != d_out {
            return Err(Error::invalid(format!(
                "clicked vector length {} does not match encoder dim {d_out}",
                vec.len()
            )));
        }
        hist.extend_from_slice(vec);
    }
    Ok(forward_user(&hist, clicked.len(), params).user)
}

/// Click score: plain dot product.
pub fn score(user_vec: &[f64], cand_vec: &[f64]) -> Result<f64> {
    if user_vec.len() != cand_vec.len() {
        return Err(Error::invalid(format!(
            "user vector length {} does not match candidate length {}",
            user_vec.len(),
            cand_vec.len()
        )));
    }
    Ok(dot(user_vec, cand_vec))
}

/// Flat gradient (or optimizer-moment) buffers matching the trainable
/// tensors: five encoder tensors plus the projection weight and bias.
struct GradBuffers {
    query: Vec<f64>,
    key: Vec<f64>,
    value: Vec<f64>,
    attn_proj: Vec<f64>,
    attn_query: Vec<f64>,
    proj_weight: Vec<f64>,
    proj_bias: Vec<f64>,
}

impl GradBuffers {
    fn zeros(enc: &UserEncoderParams, proj: &ProjectionParams) -> Self {
        GradBuffers {
            query: vec![0.0; enc.query.len()],
            key: vec![0.0; enc.key.len()],
            value: vec![0.0; enc.value.len()],
            attn_proj: vec![0.0; enc.attn_proj.len()],
            attn_query: vec![0.0; enc.attn_query.len()],
            proj_weight: vec![0.0; proj.weight().len()],
            proj_bias: vec![0.0; proj.bias().len()],
        }
    }

    fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.attn_proj,
            &self.attn_query,
            &self.proj_weight,
            &self.proj_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_proj,
            &mut self.attn_query,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]
    }

    fn add(&mut self, other: &GradBuffers) {
        for (mine, theirs) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for tensor in self.tensors_mut() {
            for v in tensor.iter_mut() {
                *v *= s;
            }
        }
    }
}

struct AdamState {
    m: GradBuffers,
    v: GradBuffers,
    step: u64,
}

fn adam_update(
    enc: &mut UserEncoderParams,
    proj: &mut ProjectionParams,
    grads: &GradBuffers,
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let (proj_weight, proj_bias) = proj.parts_mut();
    let params: [&mut [f64]; 7] = [
        &mut enc.query,
        &mut enc.key,
        &mut enc.value,
        &mut enc.attn_proj,
        &mut enc.attn_query,
        proj_weight,
        proj_bias,
    ];
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for (((param, grad), m), v) in params.into_iter().zip(g).zip(m).zip(v) {
        for i in 0..param.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// One impression with ids resolved to catalog indices and the history
/// already truncated to the most recent `max_history` clicks.
struct PreppedImpression {
    history: Vec<u32>,
    positives: Vec<u32>,
    negatives: Vec<u32>,
}

/// One training example: candidate 0 is the clicked item, the rest are the
/// sampled negatives.
struct EpochGroup {
    imp: u32,
    cands: Vec<u32>,
}

fn sample_negatives(
    rng: &mut ChaCha8Rng,
    negatives: &[u32],
    k: usize,
    positive: u32,
    catalog_len: usize,
    out: &mut Vec<u32>,
) {
    if negatives.len() >= k {
        let mut pool = negatives.to_vec();
        for slot in 0..k {
            let pick = rng.random_range(slot..pool.len());
            pool.swap(slot, pick);
            out.push(pool[slot]);
        }
        return;
    }
    out.extend_from_slice(negatives);
    while out.len() < k + 1 {
        // out[0] is the positive; fill from the catalog, avoiding repeats
        // where possible but never spinning forever on tiny catalogs.
        let mut choice = None;
        for _ in 0..32 {
            let c = rng.random_range(0..catalog_len) as u32;
            if c != positive && !out.contains(&c) {
                choice = Some(c);
                break;
            }
        }
        out.push(choice.unwrap_or_else(|| rng.random_range(0..catalog_len) as u32));
    }
}

/// Fresh negatives and a fresh visiting order every epoch, all derived from
/// the config seed.
fn build_epoch_groups(
    prepped: &[PreppedImpression],
    base: &[(u32, u32)],
    k: usize,
    catalog_len: usize,
    seed: u64,
    epoch: usize,
) -> Vec<EpochGroup> {
    let neg_base = derive_seed(seed, "negatives");
    let mut groups: Vec<EpochGroup> = base
        .iter()
        .enumerate()
        .map(|(g_idx, &(imp, positive))| {
            let stream = (epoch as u64) * base.len() as u64 + g_idx as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(neg_base, stream));
            let mut cands = Vec::with_capacity(k + 1);
            cands.push(positive);
            sample_negatives(
                &mut rng,
                &prepped[imp as usize].negatives,
                k,
                positive,
                catalog_len,
                &mut cands,
            );
            EpochGroup { imp, cands }
        })
        .collect();
    let mut order_rng =
        ChaCha8Rng::seed_from_u64(split_seed(derive_seed(seed, "group-order"), epoch as u64));
    groups.shuffle(&mut order_rng);
    groups
}

/// Frozen per-catalog-item inputs, flattened for cache-friendly access.
struct TrainContext<'a> {
    catalog_llm: &'a [f64],
    catalog_cooc: &'a [f64],
    d_llm: usize,
    d_out: usize,
    prepped: &'a [PreppedImpression],
}

/// Sum of group losses and unscaled gradient sums for one chunk. The fused
/// vector of each referenced item is computed once under the current
/// projection; projection gradients are pooled per item before the outer
/// product so the d_llm-sized work runs once per distinct item.
fn chunk_loss_grads(
    groups: &[EpochGroup],
    ctx: &TrainContext,
    enc: &UserEncoderParams,
    proj: &ProjectionParams,
) -> (f64, GradBuffers) {
    let d_out = ctx.d_out;
    let mut grads = GradBuffers::zeros(enc, proj);

    let mut ids: Vec<u32> = groups
        .iter()
        .flat_map(|g| {
            ctx.prepped[g.imp as usize]
                .history
                .iter()
                .chain(g.cands.iter())
                .copied()
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let slot_of: HashMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut fused = vec![0.0; ids.len() * d_out];
    for (slot, &id) in ids.iter().enumerate() {
        let llm = &ctx.catalog_llm[id as usize * ctx.d_llm..(id as usize + 1) * ctx.d_llm];
        let cooc = &ctx.catalog_cooc[id as usize * d_out..(id as usize + 1) * d_out];
        let out = &mut fused[slot * d_out..(slot + 1) * d_out];
        for r in 0..d_out {
            let row = &proj.weight()[r * ctx.d_llm..(r + 1) * ctx.d_llm];
            out[r] = proj.bias()[r] + dot(row, llm) + cooc[r];
        }
    }

    let mut dn_accum: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let mut hist_buf: Vec<f64> = Vec::new();
    let mut d_hist: Vec<f64> = Vec::new();
    for g in groups {
        let hist_ids = &ctx.prepped[g.imp as usize].history;
        let len = hist_ids.len();
        hist_buf.clear();
        hist_buf.resize(len * d_out, 0.0);
        for (i, &id) in hist_ids.iter().enumerate() {
            let slot = slot_of[&id];
            hist_buf[i * d_out..(i + 1) * d_out]
                .copy_from_slice(&fused[slot * d_out..(slot + 1) * d_out]);
        }
        let fwd = forward_user(&hist_buf, len, enc);

        let m = g.cands.len();
        let mut scores = vec![0.0; m];
        for (j, &cid) in g.cands.iter().enumerate() {
            let slot = slot_of[&cid];
            scores[j] = dot(&fwd.user, &fused[slot * d_out..(slot + 1) * d_out]);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        let mut probs = vec![0.0; m];
        for j in 0..m {
            probs[j] = (scores[j] - max).exp();
            sum_exp += probs[j];
        }
        for p in probs.iter_mut() {
            *p /= sum_exp;
        }
        loss_sum += sum_exp.ln() + max - scores[0];

        let mut du = vec![0.0; d_out];
        for j in 0..m {
            let ds = probs[j] - if j == 0 { 1.0 } else { 0.0 };
            let slot = slot_of[&g.cands[j]];
            let cand = &fused[slot * d_out..(slot + 1) * d_out];
            for r in 0..d_out {
                du[r] += ds * cand[r];
            }
            let entry = dn_accum
                .entry(g.cands[j])
                .or_insert_with(|| vec![0.0; d_out]);
            for r in 0..d_out {
                entry[r] += ds * fwd.user[r];
            }
        }

        d_hist.clear();
        d_hist.resize(len * d_out, 0.0);
        backward_user(enc, &hist_buf, &fwd, &du, &mut grads, &mut d_hist);
        for (i, &id) in hist_ids.iter().enumerate() {
            let entry = dn_accum.entry(id).or_insert_with(|| vec![0.0; d_out]);
            for (e, &dv) in entry.iter_mut().zip(&d_hist[i * d_out..(i + 1) * d_out]) {
                *e += dv;
            }
        }
    }

    for (&id, dn) in &dn_accum {
        let llm = &ctx.catalog_llm[id as usize * ctx.d_llm..(id as usize + 1) * ctx.d_llm];
        outer_add(&mut grads.proj_weight, dn, llm);
        for (b, &d) in grads.proj_bias.iter_mut().zip(dn) {
            *b += d;
        }
    }

    (loss_sum, grads)
}

/// Loss and gradient sums over a batch. Chunks run in parallel but are
/// reduced in index order, so the result is bit-identical for any thread
/// count.
fn batch_loss_grads(
    batch: &[EpochGroup],
    ctx: &TrainContext,
    enc: &UserEncoderParams,
    proj: &ProjectionParams,
) -> (f64, GradBuffers) {
    let partials: Vec<(f64, GradBuffers)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_loss_grads(chunk, ctx, enc, proj))
        .collect();
    let mut loss = 0.0;
    let mut total = GradBuffers::zeros(enc, proj);
    for (l, g) in &partials {
        loss += l;
        total.add(g);
    }
    (loss, total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainStats {
    /// Mean sampled-softmax loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub groups_per_epoch: u64,
    /// Groups dropped because the impression had no usable click history.
    pub skipped_empty_history: u64,
    /// Catalog items given a zero LLM vector under the fallback policy.
    pub missing_llm_zeroed: u64,
}

/// Train the user encoder and the LLM projection jointly. `cooc_vectors`
/// holds the frozen pre-projection co-occurrence vector per catalog item and
/// defines the candidate catalog; `llm` holds the frozen LLM vectors.
pub fn train(
    impressions: &[Impression],
    llm: &VectorTable,
    cooc_vectors: &VectorTable,
    mut encoder: UserEncoderParams,
    mut proj: ProjectionParams,
    cfg: &TrainConfig,
    llm_policy: LlmCoverage,
) -> Result<(UserEncoderParams, ProjectionParams, TrainStats)> {
    cfg.validate()?;
    let d_out = encoder.d_out();
    if proj.d_out() != d_out {
        return Err(Error::invalid(format!(
            "projection output {} does not match encoder dim {d_out}",
            proj.d_out()
        )));
    }
    if cooc_vectors.dim() != d_out && !cooc_vectors.is_empty() {
        return Err(Error::invalid(format!(
            "cooc vector dim {} does not match encoder dim {d_out}",
            cooc_vectors.dim()
        )));
    }
    if llm.dim() != proj.d_llm() && !llm.is_empty() {
        return Err(Error::invalid(format!(
            "llm table dim {} does not match projection input {}",
            llm.dim(),
            proj.d_llm()
        )));
    }

    let catalog: Vec<&str> = cooc_vectors.ids().collect();
    let index: HashMap<&str, u32> = catalog
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as u32))
        .collect();

    let d_llm = proj.d_llm();
    let mut catalog_llm = vec![0.0f64; catalog.len() * d_llm];
    let mut missing_llm: Vec<String> = Vec::new();
    for (i, id) in catalog.iter().enumerate() {
        match llm.get(id) {
            Some(vec) => {
                for (dst, &v) in catalog_llm[i * d_llm..(i + 1) * d_llm].iter_mut().zip(vec) {
                    *dst = v as f64;
                }
            }
            None => missing_llm.push(id.to_string()),
        }
    }
    if llm_policy == LlmCoverage::Strict && !missing_llm.is_empty() {
        return Err(Error::MissingIds {
            context: "llm embedding table".to_string(),
            ids: missing_llm,
        });
    }
    let missing_llm_zeroed = missing_llm.len() as u64;

    let mut catalog_cooc = vec![0.0f64; catalog.len() * d_out];
    for (i, id) in catalog.iter().enumerate() {
        let vec = cooc_vectors.get(id).expect("id from same table");
        for (dst, &v) in catalog_cooc[i * d_out..(i + 1) * d_out].iter_mut().zip(vec) {
            *dst = v as f64;
        }
    }

    let mut unresolved: Vec<String> = Vec::new();
    let mut resolve = |id: &str| -> Option<u32> {
        match index.get(id) {
            Some(&i) => Some(i),
            None => {
                unresolved.push(id.to_string());
                None
            }
        }
    };
    let mut prepped = Vec::with_capacity(impressions.len());
    for imp in impressions {
        let start = imp.history.len().saturating_sub(cfg.max_history);
        let history: Vec<u32> = imp.history[start..].iter().filter_map(|id| resolve(id)).collect();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (id, label) in &imp.candidates {
            match resolve(id) {
                Some(i) => {
                    if *label == 1 {
                        positives.push(i);
                    } else {
                        negatives.push(i);
                    }
                }
                None => {}
            }
        }
        prepped.push(PreppedImpression {
            history,
            positives,
            negatives,
        });
    }
    if !unresolved.is_empty() {
        unresolved.sort();
        unresolved.dedup();
        return Err(Error::MissingIds {
            context: "co-occurrence vector table".to_string(),
            ids: unresolved,
        });
    }

    let mut base: Vec<(u32, u32)> = Vec::new();
    let mut skipped_empty_history = 0u64;
    for (i, prep) in prepped.iter().enumerate() {
        if prep.history.is_empty() {
            skipped_empty_history += prep.positives.len() as u64;
            continue;
        }
        for &pos in &prep.positives {
            base.push((i as u32, pos));
        }
    }
    if base.is_empty() {
        return Err(Error::invalid(
            "no positive examples with a non-empty history in the corpus",
        ));
    }

    let ctx = TrainContext {
        catalog_llm: &catalog_llm,
        catalog_cooc: &catalog_cooc,
        d_llm,
        d_out,
        prepped: &prepped,
    };
    let mut adam = AdamState {
        m: GradBuffers::zeros(&encoder, &proj),
        v: GradBuffers::zeros(&encoder, &proj),
        step: 0,
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let groups = build_epoch_groups(
            &prepped,
            &base,
            cfg.negatives_per_positive,
            catalog.len(),
            cfg.seed,
            epoch,
        );
        let mut loss_total = 0.0;
        for batch in groups.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch_loss_grads(batch, &ctx, &encoder, &proj);
            grads.scale(1.0 / batch.len() as f64);
            adam_update(&mut encoder, &mut proj, &grads, &mut adam, cfg.learning_rate);
            loss_total += loss;
        }
        epoch_losses.push(loss_total / groups.len() as f64);
    }

    Ok((
        encoder,
        proj,
        TrainStats {
            epoch_losses,
            groups_per_epoch: base.len() as u64,
            skipped_empty_history,
            missing_llm_zeroed,
        },
    ))
}

/// Score every candidate of one impression, preserving input order. The
/// history is truncated to the most recent `max_history` clicks. In strict
/// mode any id absent from the table is an error; otherwise missing history
/// items are skipped and missing candidates score as zero vectors.
pub fn predict(
    impression: &Impression,
    params: &UserEncoderParams,
    news_vectors: &VectorTable,
    max_history: usize,
    strict: bool,
) -> Result<Vec<(String, f64)>> {
    let d_out = params.d_out();
    if news_vectors.dim() != d_out && !news_vectors.is_empty() {
        return Err(Error::invalid(format!(
            "news vector dim {} does not match encoder dim {d_out}",
            news_vectors.dim()
        )));
    }
    let mut missing: Vec<String> = Vec::new();
    let start = impression.history.len().saturating_sub(max_history);
    let mut clicked: Vec<Vec<f64>> = Vec::new();
    for id in &impression.history[start..] {
        match news_vectors.get(id) {
            Some(vec) => clicked.push(vec.iter().map(|&v| v as f64).collect()),
            None => missing.push(id.clone()),
        }
    }
    let mut cand_vecs: Vec<Option<Vec<f64>>> = Vec::with_capacity(impression.candidates.len());
    for (id, _) in &impression.candidates {
        match news_vectors.get(id) {
            Some(vec) => cand_vecs.push(Some(vec.iter().map(|&v| v as f64).collect())),
            None => {
                missing.push(id.clone());
                cand_vecs.push(None);
            }
        }
    }
    if strict && !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingIds {
            context: "news vector table".to_string(),
            ids: missing,
        });
    }
    let user = encode_user(&clicked, params)?;
    let mut out = Vec::with_capacity(impression.candidates.len());
    for ((id, _), cand) in impression.candidates.iter().zip(cand_vecs) {
        let s = match cand {
            Some(vec) => score(&user, &vec)?,
            None => 0.0,
        };
        out.push((id.clone(), s));
    }
    Ok(out)
}

/// Score impressions in parallel and macro-average the ranking metrics.
/// Impression order fixes the aggregation order, so the report does not
/// depend on thread count.
pub fn evaluate_model(
    impressions: &[Impression],
    params: &UserEncoderParams,
    news_vectors: &VectorTable,
    max_history: usize,
    strict: bool,
) -> Result<MetricsReport> {
    let scored: Vec<Result<(Vec<f64>, Vec<u8>)>> = impressions
        .par_iter()
        .map(|imp| {
            predict(imp, params, news_vectors, max_history, strict).map(|scores| {
                (
                    scores.into_iter().map(|(_, s)| s).collect(),
                    imp.candidates.iter().map(|(_, l)| *l).collect(),
                )
            })
        })
        .collect();
    let pairs: Vec<(Vec<f64>, Vec<u8>)> = scored.into_iter().collect::<Result<_>>()?;
    metrics::aggregate(pairs.iter().map(|(s, l)| (s.as_slice(), l.as_slice())))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    heads: usize,
    head_dim: usize,
    d_a: usize,
    d_out: usize,
    d_llm: usize,
    train: TrainConfig,
}

const CHECKPOINT_FORMAT: &str = "lecop-checkpoint-v1";
const CHECKPOINT_TENSORS: [&str; 7] = [
    "query",
    "key",
    "value",
    "attn_proj",
    "attn_query",
    "proj_weight",
    "proj_bias",
];

/// Checkpoint file: one JSON header line with shapes and the training
/// config, then each tensor as a single-record table in the shared binary
/// vector layout (f32), in `CHECKPOINT_TENSORS` order.
pub fn write_checkpoint(
    path: &std::path::Path,
    encoder: &UserEncoderParams,
    proj: &ProjectionParams,
    cfg: &TrainConfig,
) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        heads: encoder.heads,
        head_dim: encoder.head_dim,
        d_a: encoder.d_a,
        d_out: encoder.d_out(),
        d_llm: proj.d_llm(),
        train: cfg.clone(),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    let tensors: [&[f64]; 7] = [
        &encoder.query,
        &encoder.key,
        &encoder.value,
        &encoder.attn_proj,
        &encoder.attn_query,
        proj.weight(),
        proj.bias(),
    ];
    for (name, tensor) in CHECKPOINT_TENSORS.iter().zip(tensors) {
        let mut table = VectorTable::new(tensor.len());
        table.insert(*name, tensor.iter().map(|&v| v as f32).collect::<Vec<f32>>())?;
        table.write_binary_to(&mut w).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_checkpoint(
    path: &std::path::Path,
) -> Result<(UserEncoderParams, ProjectionParams, TrainConfig)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    use std::io::BufRead;
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| {
        Error::BadFormat {
            path: path.to_path_buf(),
            message: format!("bad checkpoint header: {e}"),
        }
    })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            message: format!("unknown checkpoint format {:?}", header.format),
        });
    }
    if header.heads * header.head_dim != header.d_out {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            message: "inconsistent header dimensions".to_string(),
        });
    }
    let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(7);
    for name in CHECKPOINT_TENSORS {
        let table = VectorTable::read_binary_from(&mut r, path)?;
        let row = table.get(name).ok_or_else(|| Error::BadFormat {
            path: path.to_path_buf(),
            message: format!("checkpoint tensor {name:?} missing"),
        })?;
        tensors.push(row.iter().map(|&v| v as f64).collect());
    }
    let proj_bias = tensors.pop().expect("seven tensors");
    let proj_weight = tensors.pop().expect("seven tensors");
    let attn_query = tensors.pop().expect("seven tensors");
    let attn_proj = tensors.pop().expect("seven tensors");
    let value = tensors.pop().expect("seven tensors");
    let key = tensors.pop().expect("seven tensors");
    let query = tensors.pop().expect("seven tensors");
    let encoder = UserEncoderParams::from_parts(
        header.heads,
        header.head_dim,
        header.d_a,
        query,
        key,
        value,
        attn_proj,
        attn_query,
    )?;
    let proj = ProjectionParams::from_parts(header.d_out, header.d_llm, proj_weight, proj_bias)?;
    Ok((encoder, proj, header.train))
}
