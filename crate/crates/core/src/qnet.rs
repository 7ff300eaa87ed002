//! Multi-channel stacked self-attention Q-network.
//!
//! Each rating score gets its own channel: the items the user rated `z`
//! are embedded, run through `b` stacked blocks of causal scaled
//! dot-product self-attention plus a point-wise feed-forward layer, and
//! the last-position feature of every channel is concatenated and mapped
//! by a two-layer policy head to one Q-value per item.
//!
//! The backward pass is derived by hand and returns the gradient of a
//! single selected Q-value with respect to every parameter; it is checked
//! against central finite differences in the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::checkpoint::TensorFile;
use crate::data_env::{ItemId, SupportState};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Mask, Matrix};

/// Shape hyperparameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QNetConfig {
    pub n_items: usize,
    /// Latent dimension d.
    pub dim: usize,
    /// Number of stacked self-attention blocks.
    pub blocks: usize,
    /// Number of rating channels.
    pub r_max: u8,
}

/// One self-attention block: query/key/value projections plus the
/// point-wise two-layer feed-forward net.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

/// The policy head mapping the concatenated channel features to Q-values.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// All learnable weights. Doubles as the gradient container: `backward`
/// returns a `QNetParams` of the same shape family.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetParams {
    cfg: QNetConfig,
    pub embedding: Matrix,
    /// `channels[z-1][l]` is block `l` of rating channel `z`.
    pub channels: Vec<Vec<BlockParams>>,
    pub policy: PolicyParams,
}

pub type QNetGrads = QNetParams;

impl QNetParams {
    /// Seeded init: weights uniform in [-1/√d, 1/√d], biases zero.
    pub fn init(cfg: QNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        let mut uniform =
            |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));

        let embedding = uniform(cfg.n_items, cfg.dim);
        let mut channels = Vec::with_capacity(cfg.r_max as usize);
        for _ in 0..cfg.r_max {
            let mut blocks = Vec::with_capacity(cfg.blocks);
            for _ in 0..cfg.blocks {
                blocks.push(BlockParams {
                    w_query: uniform(cfg.dim, cfg.dim),
                    w_key: uniform(cfg.dim, cfg.dim),
                    w_value: uniform(cfg.dim, cfg.dim),
                    ffn_w1: uniform(cfg.dim, cfg.dim),
                    ffn_b1: Matrix::zeros(1, cfg.dim),
                    ffn_w2: uniform(cfg.dim, cfg.dim),
                    ffn_b2: Matrix::zeros(1, cfg.dim),
                });
            }
            channels.push(blocks);
        }
        let concat = cfg.r_max as usize * cfg.dim;
        let policy = PolicyParams {
            w1: uniform(concat, cfg.dim),
            b1: Matrix::zeros(1, cfg.dim),
            w2: uniform(cfg.dim, cfg.n_items),
            b2: Matrix::zeros(1, cfg.n_items),
        };
        QNetParams { cfg, embedding, channels, policy }
    }

    pub fn zeros(cfg: QNetConfig) -> Self {
        let zero_block = || BlockParams {
            w_query: Matrix::zeros(cfg.dim, cfg.dim),
            w_key: Matrix::zeros(cfg.dim, cfg.dim),
            w_value: Matrix::zeros(cfg.dim, cfg.dim),
            ffn_w1: Matrix::zeros(cfg.dim, cfg.dim),
            ffn_b1: Matrix::zeros(1, cfg.dim),
            ffn_w2: Matrix::zeros(cfg.dim, cfg.dim),
            ffn_b2: Matrix::zeros(1, cfg.dim),
        };
        let channels =
            (0..cfg.r_max).map(|_| (0..cfg.blocks).map(|_| zero_block()).collect()).collect();
        let concat = cfg.r_max as usize * cfg.dim;
        QNetParams {
            cfg,
            embedding: Matrix::zeros(cfg.n_items, cfg.dim),
            channels,
            policy: PolicyParams {
                w1: Matrix::zeros(concat, cfg.dim),
                b1: Matrix::zeros(1, cfg.dim),
                w2: Matrix::zeros(cfg.dim, cfg.n_items),
                b2: Matrix::zeros(1, cfg.n_items),
            },
        }
    }

    pub fn config(&self) -> QNetConfig {
        self.cfg
    }

    /// Tensor names in serialization order.
    pub fn tensor_names(cfg: QNetConfig) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for z in 1..=cfg.r_max {
            for l in 1..=cfg.blocks {
                for field in ["w_query", "w_key", "w_value", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"] {
                    names.push(format!("channel{z}.block{l}.{field}"));
                }
            }
        }
        for field in ["w1", "b1", "w2", "b2"] {
            names.push(format!("policy.{field}"));
        }
        names
    }

    /// All tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for blocks in &self.channels {
            for b in blocks {
                out.extend([&b.w_query, &b.w_key, &b.w_value, &b.ffn_w1, &b.ffn_b1, &b.ffn_w2, &b.ffn_b2]);
            }
        }
        out.extend([&self.policy.w1, &self.policy.b1, &self.policy.w2, &self.policy.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for blocks in &mut self.channels {
            for b in blocks {
                out.extend([
                    &mut b.w_query,
                    &mut b.w_key,
                    &mut b.w_value,
                    &mut b.ffn_w1,
                    &mut b.ffn_b1,
                    &mut b.ffn_w2,
                    &mut b.ffn_b2,
                ]);
            }
        }
        out.extend([
            &mut self.policy.w1,
            &mut self.policy.b1,
            &mut self.policy.w2,
            &mut self.policy.b2,
        ]);
        out
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// All parameters as one flat vector, in serialization order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for t in self.tensors() {
            flat.extend_from_slice(t.as_slice());
        }
        flat
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(format!(
                "flat vector has {} values, params need {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.rows() * t.cols();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Add all tensors into a flat accumulator (gradient accumulation).
    pub fn accumulate_flat(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.n_params(), "accumulator length mismatch");
        let mut offset = 0;
        for t in self.tensors() {
            for (acc, &g) in out[offset..].iter_mut().zip(t.as_slice()) {
                *acc += g;
            }
            offset += t.rows() * t.cols();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tf = TensorFile::new();
        tf.set_meta("kind", "qnet");
        tf.set_meta("n_items", self.cfg.n_items);
        tf.set_meta("dim", self.cfg.dim);
        tf.set_meta("blocks", self.cfg.blocks);
        tf.set_meta("r_max", self.cfg.r_max);
        for (name, tensor) in Self::tensor_names(self.cfg).into_iter().zip(self.tensors()) {
            tf.push_tensor(name, tensor.clone());
        }
        tf.write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tf = TensorFile::read_file(path)?;
        if tf.meta("kind")? != "qnet" {
            return Err(Error::Checkpoint("not a qnet checkpoint".into()));
        }
        let cfg = QNetConfig {
            n_items: tf.meta_usize("n_items")?,
            dim: tf.meta_usize("dim")?,
            blocks: tf.meta_usize("blocks")?,
            r_max: tf.meta_usize("r_max")? as u8,
        };
        let mut params = QNetParams::zeros(cfg);
        let names = Self::tensor_names(cfg);
        for (name, slot) in names.into_iter().zip(params.tensors_mut()) {
            *slot = tf.take_tensor(&name, slot.rows(), slot.cols())?;
        }
        Ok(params)
    }
}

/// Embed the items of rating channel `z`, one row per item in
/// recommendation order. An empty channel yields a 0×d matrix.
pub fn embed_channel(params: &QNetParams, state: &SupportState, z: u8) -> Matrix {
    let items = state.channel(z);
    let d = params.cfg.dim;
    let mut e = Matrix::zeros(items.len(), d);
    for (m, &item) in items.iter().enumerate() {
        e.row_mut(m).copy_from_slice(params.embedding.row(item as usize));
    }
    e
}

/// Scaled dot-product attention `softmax(C Kᵀ / √d) V`, optionally with a
/// causal mask forbidding position i from attending to positions j > i.
pub fn attention(queries: &Matrix, keys: &Matrix, values: &Matrix, causal: bool) -> Matrix {
    assert_eq!(queries.cols(), keys.cols(), "query/key width mismatch");
    assert_eq!(keys.rows(), values.rows(), "key/value length mismatch");
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let mut scores = queries.matmul_tr(keys);
    scores.scale(scale);
    let mask = causal.then(|| Mask::causal(scores.rows()));
    let probs = softmax_rows(&scores, mask.as_ref())
        .expect("causal attention rows always keep their own position");
    probs.matmul(values)
}

/// Point-wise feed-forward layer `ReLU(x W1 + b1) W2 + b2` on one row.
pub fn ffn(x: &[f64], block: &BlockParams) -> Vec<f64> {
    let xm = Matrix::from_rows(&[x]);
    let out = ffn_rows(&xm, block).2;
    out.row(0).to_vec()
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Row-wise FFN returning (pre-activation, hidden, output).
fn ffn_rows(x: &Matrix, block: &BlockParams) -> (Matrix, Matrix, Matrix) {
    let mut pre = x.matmul(&block.ffn_w1);
    for i in 0..pre.rows() {
        let row = pre.row_mut(i);
        for (v, &b) in row.iter_mut().zip(block.ffn_b1.row(0)) {
            *v += b;
        }
    }
    let hidden = relu(&pre);
    let mut out = hidden.matmul(&block.ffn_w2);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, &b) in row.iter_mut().zip(block.ffn_b2.row(0)) {
            *v += b;
        }
    }
    (pre, hidden, out)
}

/// Per-block intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Matrix,
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    /// Causally masked softmax weights.
    pub probs: Matrix,
    /// Attention output `probs · values`.
    pub attended: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_hidden: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ChannelCache {
    pub items: Vec<ItemId>,
    pub blocks: Vec<BlockCache>,
}

/// Everything `backward` needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cfg: QNetConfig,
    /// One entry per rating channel; `None` for empty channels.
    pub channels: Vec<Option<ChannelCache>>,
    /// Concatenated per-channel last-row features, 1×(r_max·d).
    pub concat: Matrix,
    pub policy_pre: Matrix,
    pub policy_hidden: Matrix,
}

impl ForwardCache {
    /// Final feature matrix of channel `z`, if the channel is non-empty.
    pub fn channel_feature(&self, z: u8) -> Option<&Matrix> {
        self.channels[(z - 1) as usize].as_ref().map(|c| &c.blocks[self.cfg.blocks - 1].output)
    }

    /// Smallest |pre-activation| across every ReLU in the evaluation.
    /// Gradient checks skip configurations that sit on a kink.
    pub fn min_relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for ch in self.channels.iter().flatten() {
            for b in &ch.blocks {
                for &v in b.ffn_pre.as_slice() {
                    margin = margin.min(v.abs());
                }
            }
        }
        for &v in self.policy_pre.as_slice() {
            margin = margin.min(v.abs());
        }
        margin
    }
}

/// Evaluate Q-values for every item given the support state.
pub fn forward(params: &QNetParams, state: &SupportState) -> (Vec<f64>, ForwardCache) {
    let cfg = params.cfg;
    assert_eq!(state.r_max() as usize, cfg.r_max as usize, "state/params channel count mismatch");
    let d = cfg.dim;
    let mut concat = Matrix::zeros(1, cfg.r_max as usize * d);
    let mut channels = Vec::with_capacity(cfg.r_max as usize);

    for z in 1..=cfg.r_max {
        let items = state.channel(z);
        if items.is_empty() {
            channels.push(None);
            continue;
        }
        let mut x = embed_channel(params, state, z);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for block in &params.channels[(z - 1) as usize] {
            let queries = x.matmul(&block.w_query);
            let keys = x.matmul(&block.w_key);
            let values = x.matmul(&block.w_value);
            let mut scores = queries.matmul_tr(&keys);
            scores.scale(1.0 / (d as f64).sqrt());
            let probs = softmax_rows(&scores, Some(&Mask::causal(scores.rows())))
                .expect("causal rows are never fully masked");
            let attended = probs.matmul(&values);
            let (ffn_pre, ffn_hidden, output) = ffn_rows(&attended, block);
            blocks.push(BlockCache {
                input: x,
                queries,
                keys,
                values,
                probs,
                attended,
                ffn_pre,
                ffn_hidden,
                output: output.clone(),
            });
            x = output;
        }
        let last = x.row(x.rows() - 1);
        concat.row_mut(0)[(z - 1) as usize * d..z as usize * d].copy_from_slice(last);
        channels.push(Some(ChannelCache { items: items.to_vec(), blocks }));
    }

    let (policy_pre, policy_hidden, q) = policy_head(params, &concat);
    let cache = ForwardCache { cfg, channels, concat, policy_pre, policy_hidden };
    (q.row(0).to_vec(), cache)
}

fn policy_head(params: &QNetParams, concat: &Matrix) -> (Matrix, Matrix, Matrix) {
    let p = &params.policy;
    let mut pre = concat.matmul(&p.w1);
    for (v, &b) in pre.row_mut(0).iter_mut().zip(p.b1.row(0)) {
        *v += b;
    }
    let hidden = relu(&pre);
    let mut q = hidden.matmul(&p.w2);
    for (v, &b) in q.row_mut(0).iter_mut().zip(p.b2.row(0)) {
        *v += b;
    }
    (pre, hidden, q)
}

fn relu_gate(grad: &Matrix, pre: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (g, &a) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        // ReLU'(0) := 0
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Gradient of `upstream · Q(state, selected_item)` with respect to every
/// parameter. The cache must come from a forward pass on the same params.
pub fn backward(
    params: &QNetParams,
    cache: &ForwardCache,
    selected_item: ItemId,
    upstream: f64,
) -> Result<QNetGrads> {
    let cfg = params.cfg;
    if cache.cfg != cfg {
        return Err(Error::shape(format!(
            "stale forward cache: cache built for {:?}, params are {:?}",
            cache.cfg, cfg
        )));
    }
    if (selected_item as usize) >= cfg.n_items {
        return Err(Error::shape(format!(
            "selected item {selected_item} out of range for {} items",
            cfg.n_items
        )));
    }
    let d = cfg.dim;
    let sel = selected_item as usize;
    let mut grads = QNetParams::zeros(cfg);

    // Policy head: q = ReLU(u W1 + b1) W2 + b2, dq = upstream at `sel`.
    let p = &params.policy;
    grads.policy.b2.add_at(0, sel, upstream);
    for k in 0..d {
        grads.policy.w2.add_at(k, sel, upstream * cache.policy_hidden.get(0, k));
    }
    let mut d_hidden = Matrix::zeros(1, d);
    for k in 0..d {
        d_hidden.set(0, k, upstream * p.w2.get(k, sel));
    }
    let d_pre = relu_gate(&d_hidden, &cache.policy_pre);
    grads.policy.b1.add_scaled(&d_pre, 1.0);
    // dW1 = uᵀ d_pre
    grads.policy.w1.add_scaled(&cache.concat.tr_matmul(&d_pre), 1.0);
    // du = d_pre W1ᵀ
    let d_concat = d_pre.matmul_tr(&p.w1);

    let scale = 1.0 / (d as f64).sqrt();
    for z in 1..=cfg.r_max {
        let Some(channel) = &cache.channels[(z - 1) as usize] else {
            continue;
        };
        let n = channel.items.len();
        // Only the last row feeds the policy head.
        let mut d_out = Matrix::zeros(n, d);
        d_out
            .row_mut(n - 1)
            .copy_from_slice(&d_concat.row(0)[(z - 1) as usize * d..z as usize * d]);

        for l in (0..cfg.blocks).rev() {
            let bc = &channel.blocks[l];
            let bp = &params.channels[(z - 1) as usize][l];
            let gb = &mut grads.channels[(z - 1) as usize][l];

            // FFN backward: out = ReLU(S W1 + b1) W2 + b2.
            for m in 0..n {
                for (acc, &g) in gb.ffn_b2.row_mut(0).iter_mut().zip(d_out.row(m)) {
                    *acc += g;
                }
            }
            gb.ffn_w2.add_scaled(&bc.ffn_hidden.tr_matmul(&d_out), 1.0);
            let d_hidden = d_out.matmul_tr(&bp.ffn_w2);
            let d_ffn_pre = relu_gate(&d_hidden, &bc.ffn_pre);
            for m in 0..n {
                for (acc, &g) in gb.ffn_b1.row_mut(0).iter_mut().zip(d_ffn_pre.row(m)) {
                    *acc += g;
                }
            }
            gb.ffn_w1.add_scaled(&bc.attended.tr_matmul(&d_ffn_pre), 1.0);
            let d_attended = d_ffn_pre.matmul_tr(&bp.ffn_w1);

            // Attention backward: S = P V, P = softmax(C Kᵀ·scale, causal).
            let d_probs = d_attended.matmul_tr(&bc.values);
            let d_values = bc.probs.tr_matmul(&d_attended);
            let mut d_scores = Matrix::zeros(n, n);
            for i in 0..n {
                let p_row = bc.probs.row(i);
                let dp_row = d_probs.row(i);
                let inner: f64 = p_row.iter().zip(dp_row).map(|(p, g)| p * g).sum();
                for j in 0..n {
                    // Masked entries have p = 0 and stay 0.
                    d_scores.set(i, j, p_row[j] * (dp_row[j] - inner));
                }
            }
            let mut d_queries = d_scores.matmul(&bc.keys);
            d_queries.scale(scale);
            let mut d_keys = d_scores.tr_matmul(&bc.queries);
            d_keys.scale(scale);

            gb.w_query.add_scaled(&bc.input.tr_matmul(&d_queries), 1.0);
            gb.w_key.add_scaled(&bc.input.tr_matmul(&d_keys), 1.0);
            gb.w_value.add_scaled(&bc.input.tr_matmul(&d_values), 1.0);

            let mut d_input = d_queries.matmul_tr(&bp.w_query);
            d_input.add_scaled(&d_keys.matmul_tr(&bp.w_key), 1.0);
            d_input.add_scaled(&d_values.matmul_tr(&bp.w_value), 1.0);
            d_out = d_input;
        }

        for (m, &item) in channel.items.iter().enumerate() {
            for (acc, &g) in grads.embedding.row_mut(item as usize).iter_mut().zip(d_out.row(m)) {
                *acc += g;
            }
        }
    }

    Ok(grads)
}
