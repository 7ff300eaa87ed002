//! Q-learning agent: ε-greedy rollouts, replay buffer, curriculum-γ
//! temporal-difference training, and the evaluation runner.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_env::{env_reset, env_step, ItemId, RatingLog, SupportState, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::metrics::{
    cumulative_precision, cumulative_recall, mean_alpha_ndcg, EpisodeTrace, TopicCatalog,
};
use crate::qnet::{backward, forward, QNetConfig, QNetParams};

/// One replay-buffer element.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: SupportState,
    pub action: ItemId,
    pub reward: f64,
    pub next_state: SupportState,
    pub done: bool,
    /// Candidate items still available in the next state, ascending.
    pub valid_next: Vec<ItemId>,
}

/// Fixed-capacity FIFO store sampled for mini-batch updates.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

pub const DEFAULT_REPLAY_CAPACITY: usize = 10_000;

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(4096)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.storage[idx]
    }

    /// Uniform sample of indices, with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.gen_range(0..self.storage.len())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}

/// ε-greedy action selection over the valid candidate set.
///
/// With probability 1−ε returns the argmax of `q` restricted to `valid`
/// (ties to the lowest item id), otherwise a uniform valid item.
pub fn select_action(
    q: &[f64],
    valid: &[ItemId],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ItemId> {
    if valid.is_empty() {
        return Err(Error::protocol("cannot select from an empty valid set"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::value(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if rng.gen::<f64>() < epsilon {
        return Ok(valid[rng.gen_range(0..valid.len())]);
    }
    Ok(greedy_action(q, valid))
}

/// Argmax of `q` over `valid`, ties to the lowest item id.
pub fn greedy_action(q: &[f64], valid: &[ItemId]) -> ItemId {
    let mut best = valid[0];
    let mut best_q = q[best as usize];
    for &item in &valid[1..] {
        if q[item as usize] > best_q {
            best = item;
            best_q = q[item as usize];
        }
    }
    best
}

/// Curriculum discount: `γ_e = 1 / (1 + (E−e)^η)`, nondecreasing in `e`
/// and exactly 1 at `e = E`.
pub fn gamma_schedule(epoch: usize, total_epochs: usize, eta: f64) -> f64 {
    let remaining = (total_epochs - epoch) as f64;
    1.0 / (1.0 + remaining.powf(eta))
}

/// Linear exploration decay from 1 at step 0 to 0 at `total_steps`.
pub fn epsilon_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    1.0 - step as f64 / total_steps as f64
}

/// Bellman target `y = r + γ·max_{i ∈ valid_next} Q(s', i)`, or `y = r`
/// on terminal transitions.
pub fn compute_target(tr: &Transition, params: &QNetParams, gamma: f64) -> Result<f64> {
    if tr.done || gamma == 0.0 {
        return Ok(tr.reward);
    }
    if tr.valid_next.is_empty() {
        return Err(Error::protocol("non-terminal transition with empty valid_next"));
    }
    let (q_next, _) = forward(params, &tr.next_state);
    let max_next = tr
        .valid_next
        .iter()
        .map(|&i| q_next[i as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(tr.reward + gamma * max_next)
}

/// Adam optimizer state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One gradient step on the mean-square TD loss over a batch.
///
/// Targets are treated as constants (no gradient through the max). The
/// optional `target_params` evaluates the bootstrap; when `None`, the
/// online network is used, as the update rule literally reads.
pub fn td_update(
    batch: &[&Transition],
    params: &mut QNetParams,
    opt: &mut AdamState,
    gamma: f64,
    lr: f64,
    target_params: Option<&QNetParams>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::value("td_update needs a non-empty batch"));
    }
    let n = batch.len() as f64;
    let mut grad_flat = vec![0.0; params.n_params()];
    let mut loss = 0.0;
    for tr in batch {
        let (q, cache) = forward(params, &tr.state);
        let q_sa = q[tr.action as usize];
        let y = compute_target(tr, target_params.unwrap_or(params), gamma)?;
        let err = y - q_sa;
        loss += err * err;
        // d/dθ (y − Q)² = −2 (y − Q) ∇Q
        let g = backward(params, &cache, tr.action, -2.0 * err / n)?;
        g.accumulate_flat(&mut grad_flat);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite TD loss {loss}; training aborted")));
    }
    let mut flat = params.to_flat();
    opt.step(&mut flat, &grad_flat, lr);
    params.copy_from_flat(&flat)?;
    Ok(loss)
}

/// Reward fed to the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// 1 for a satisfied recommendation (rating ≥ 4), else 0.
    Binary,
    /// The raw rating value.
    Raw,
}

impl RewardMode {
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "binary" => Ok(RewardMode::Binary),
            "raw" => Ok(RewardMode::Raw),
            other => Err(Error::value(format!("unknown reward mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardMode::Binary => "binary",
            RewardMode::Raw => "raw",
        }
    }

    fn reward(&self, rating: u8, satisfied: bool) -> f64 {
        match self {
            RewardMode::Binary => satisfied as u8 as f64,
            RewardMode::Raw => rating as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total epochs E.
    pub epochs: usize,
    /// Curriculum exponent η.
    pub eta: f64,
    /// Episode horizon T.
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Latent dimension d.
    pub dim: usize,
    /// Stacked block count b.
    pub blocks: usize,
    pub seed: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub reward_mode: RewardMode,
    pub replay_capacity: usize,
    /// Episodes rolled per epoch; 0 means one per training user.
    pub episodes_per_epoch: usize,
    /// Copy the bootstrap network every N updates; 0 keeps the online
    /// network as the target.
    pub target_sync: usize,
    /// Early-stop patience in epochs on validation precision@T; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            eta: 0.2,
            horizon: 40,
            batch_size: 128,
            learning_rate: 1e-3,
            dim: 16,
            blocks: 2,
            seed: 0,
            eps_start: 1.0,
            eps_end: 0.0,
            reward_mode: RewardMode::Binary,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
            episodes_per_epoch: 0,
            target_sync: 0,
            patience: 10,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub mean_td_loss: f64,
    /// Validation precision at T ∈ {5, 10, 20, 40}.
    pub valid_precision: [f64; 4],
}

pub const TRAINING_LOG_TS: [usize; 4] = [5, 10, 20, 40];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation precision@40).
    pub best_epoch: usize,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over (seed, tag)
    let mut x = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Train the Q-network by curriculum Q-learning over replayed episodes.
///
/// Returns the best-validation parameters (final parameters when there are
/// no validation users) together with the per-epoch log.
pub fn train(
    log: &RatingLog,
    split: &UserSplit,
    cfg: &TrainConfig,
) -> Result<(QNetParams, TrainingLog)> {
    if split.train.is_empty() {
        return Err(Error::value("training split is empty"));
    }
    let net_cfg = QNetConfig {
        n_items: log.n_items(),
        dim: cfg.dim,
        blocks: cfg.blocks,
        r_max: log.r_max(),
    };
    let mut params = QNetParams::init(net_cfg, derive_seed(cfg.seed, 1));
    let mut opt = AdamState::new(params.n_params());
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity, derive_seed(cfg.seed, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));

    let train_users: Vec<UserId> = split.train.iter().copied().collect();
    let valid_users: Vec<UserId> = split.valid.iter().copied().collect();
    let episodes_per_epoch = if cfg.episodes_per_epoch == 0 {
        train_users.len()
    } else {
        cfg.episodes_per_epoch
    };
    let total_steps = cfg.epochs * episodes_per_epoch * cfg.horizon;

    let mut target_params: Option<QNetParams> = (cfg.target_sync > 0).then(|| params.clone());
    let mut training_log = TrainingLog::default();
    let mut best: Option<(f64, usize, QNetParams)> = None;
    let mut env_steps = 0usize;
    let mut updates = 0usize;
    let mut epsilon = cfg.eps_start;

    for epoch in 1..=cfg.epochs {
        let gamma = gamma_schedule(epoch, cfg.epochs, cfg.eta);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for _ in 0..episodes_per_epoch {
            let user = train_users[rng.gen_range(0..train_users.len())];
            let mut state = env_reset(log, user, cfg.horizon)?;
            loop {
                epsilon = cfg.eps_end
                    + (cfg.eps_start - cfg.eps_end) * epsilon_schedule(env_steps, total_steps);
                let epsilon = epsilon.clamp(0.0, 1.0);
                let (q, _) = forward(&params, &state.history);
                let action = select_action(&q, &state.remaining, epsilon, &mut rng)?;
                let out = env_step(log, &state, action)?;
                buffer.push(Transition {
                    state: state.history.clone(),
                    action,
                    reward: cfg.reward_mode.reward(out.rating, out.satisfied),
                    next_state: out.next.history.clone(),
                    done: out.done,
                    valid_next: out.next.remaining.clone(),
                });
                env_steps += 1;

                if buffer.len() >= cfg.batch_size {
                    let idx = buffer.sample_indices(cfg.batch_size);
                    let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
                    loss_sum += td_update(
                        &batch,
                        &mut params,
                        &mut opt,
                        gamma,
                        cfg.learning_rate,
                        target_params.as_ref(),
                    )?;
                    loss_count += 1;
                    updates += 1;
                    if cfg.target_sync > 0 && updates % cfg.target_sync == 0 {
                        target_params = Some(params.clone());
                    }
                }

                state = out.next;
                if out.done {
                    break;
                }
            }
        }

        let valid_precision = if valid_users.is_empty() {
            [0.0; 4]
        } else {
            let policy = GreedyQPolicy::new(&params);
            let opts = EvalOptions {
                horizon: cfg.horizon,
                ts: TRAINING_LOG_TS.to_vec(),
                alpha: 0.5,
                seed: derive_seed(cfg.seed, 4),
                workers: 1,
            };
            let eval = evaluate(&policy, log, &valid_users, None, &opts)?;
            let mut arr = [0.0; 4];
            for (slot, row) in arr.iter_mut().zip(&eval.rows) {
                *slot = row.precision;
            }
            arr
        };

        training_log.epochs.push(EpochRecord {
            epoch,
            gamma,
            epsilon,
            mean_td_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
            valid_precision,
        });

        if !valid_users.is_empty() {
            let score = valid_precision[3];
            let improved = best.as_ref().map_or(true, |(b, _, _)| score > *b);
            if improved {
                best = Some((score, epoch, params.clone()));
            } else if cfg.patience > 0 {
                let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
                if epoch - best_epoch >= cfg.patience {
                    break;
                }
            }
        }
    }

    match best {
        Some((_, epoch, best_params)) => {
            training_log.best_epoch = epoch;
            Ok((best_params, training_log))
        }
        None => {
            training_log.best_epoch = training_log.epochs.len();
            Ok((params, training_log))
        }
    }
}

/// A recommendation policy evaluated against the offline environment.
/// One [`EpisodePolicy`] is created per user episode and owns any
/// per-episode belief state.
pub trait Policy: Sync {
    fn episode(&self) -> Box<dyn EpisodePolicy + '_>;
}

pub trait EpisodePolicy {
    fn select(
        &mut self,
        state: &SupportState,
        valid: &[ItemId],
        rng: &mut ChaCha8Rng,
    ) -> Result<ItemId>;

    /// Observe the environment's feedback for the selected item.
    fn observe(&mut self, _item: ItemId, _rating: u8) {}
}

/// Greedy (ε = 0) policy over the Q-network.
pub struct GreedyQPolicy<'a> {
    params: &'a QNetParams,
}

impl<'a> GreedyQPolicy<'a> {
    pub fn new(params: &'a QNetParams) -> Self {
        GreedyQPolicy { params }
    }
}

impl Policy for GreedyQPolicy<'_> {
    fn episode(&self) -> Box<dyn EpisodePolicy + '_> {
        Box::new(GreedyQEpisode { params: self.params })
    }
}

struct GreedyQEpisode<'a> {
    params: &'a QNetParams,
}

impl EpisodePolicy for GreedyQEpisode<'_> {
    fn select(&mut self, state: &SupportState, valid: &[ItemId], _rng: &mut ChaCha8Rng) -> Result<ItemId> {
        if valid.is_empty() {
            return Err(Error::protocol("cannot select from an empty valid set"));
        }
        let (q, _) = forward(self.params, state);
        Ok(greedy_action(&q, valid))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
     pub horizon: usize,
    /// Report metrics at these step counts.
    pub ts: Vec<usize>,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { horizon: 40, ts: vec![5, 10, 20, 40], alpha: 0.5, seed: 0, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub t: usize,
    pub precision: f64,
    pub recall: f64,
    pub alpha_ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub traces: Vec<EpisodeTrace>,
    pub rows: Vec<MetricRow>,
}

/// Run one greedy episode for `user` and record the trace.
pub fn run_episode(
    policy: &dyn Policy,
    log: &RatingLog,
    user: UserId,
    horizon: usize,
    seed: u64,
) -> Result<EpisodeTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode = policy.episode();
    let mut state = env_reset(log, user, horizon)?;
    let mut trace = EpisodeTrace::new(user);
    loop {
        let item = episode.select(&state.history, &state.remaining, &mut rng)?;
        let out = env_step(log, &state, item)?;
        episode.observe(item, out.rating);
        trace.push(item, out.rating);
        state = out.next;
        if out.done {
            break;
        }
    }
    Ok(trace)
}

/// Evaluate a policy over users: roll one episode each, then aggregate
/// cumulative precision/recall and α-NDCG at every requested T.
///
/// Episodes run in parallel over users; each user's episode is seeded by
/// (seed, user), so results are identical for any worker count.
pub fn evaluate(
    policy: &dyn Policy,
    log: &RatingLog,
    users: &[UserId],
    topics: Option<&TopicCatalog>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if users.is_empty() {
        return Err(Error::value("evaluate needs at least one user"));
    }
    let workers = if opts.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.workers
    };
    let workers = workers.min(users.len());

    let mut traces: Vec<Option<Result<EpisodeTrace>>> = (0..users.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, &user) in traces.iter_mut().zip(users) {
            *slot = Some(run_episode(policy, log, user, opts.horizon, derive_seed(opts.seed, user as u64)));
        }
    } else {
        let chunk = users.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (users_chunk, out_chunk) in users.chunks(chunk).zip(traces.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (slot, &user) in out_chunk.iter_mut().zip(users_chunk) {
                        *slot = Some(run_episode(
                            policy,
                            log,
                            user,
                            opts.horizon,
                            derive_seed(opts.seed, user as u64),
                        ));
                    }
                });
            }
        });
    }
    let traces: Vec<EpisodeTrace> =
        traces.into_iter().map(|t| t.expect("all slots filled")).collect::<Result<_>>()?;

    // Users with zero satisfied items are excluded from recall only.
    let mut satisfied_counts = BTreeMap::new();
    let mut recall_traces = Vec::new();
    for trace in &traces {
        let count = log.satisfied_count(trace.user);
        if count > 0 {
            satisfied_counts.insert(trace.user, count);
            recall_traces.push(trace.clone());
        }
    }

    let mut rows = Vec::with_capacity(opts.ts.len());
    for &t in &opts.ts {
        let precision = cumulative_precision(&traces, t)?;
        let recall = if recall_traces.is_empty() {
            0.0
        } else {
            cumulative_recall(&recall_traces, t, &satisfied_counts)?
        };
        let alpha_ndcg = match topics {
            Some(catalog) => mean_alpha_ndcg(&traces, catalog, opts.alpha, t)?,
            None => 0.0,
        };
        rows.push(MetricRow { t, precision, recall, alpha_ndcg });
    }
    Ok(Evaluation { traces, rows })
}
