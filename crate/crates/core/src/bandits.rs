//! Classical interactive collaborative-filtering baselines.
//!
//! A PMF model is fit offline on training users by alternating regularized
//! least squares; at interaction time each user carries a Gaussian belief
//! over their latent vector, updated in closed form after every observed
//! rating. Thompson sampling, GLM-UCB, and ε-greedy select against that
//! belief; random/pop/greedy-MF round out the reference policies.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{EpisodePolicy, Policy};
use crate::checkpoint::TensorFile;
use crate::data_env::{ItemId, RatingLog, SupportState, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, dot, sample_gaussian, sigmoid, spd_inverse, spd_solve, Matrix, SpdMatrix,
};

/// Item-side PMF parameters plus noise/prior variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfModel {
    /// ν_i rows, |I|×d.
    pub item_means: Matrix,
    /// Diagonal of each item's posterior covariance Ψ_i, |I|×d.
    pub item_cov_diag: Matrix,
    /// Rating noise σ².
    pub noise_var: f64,
    /// Prior variance σ_u² of user and item factors.
    pub prior_var: f64,
}

impl PmfModel {
    pub fn dim(&self) -> usize {
        self.item_means.cols()
    }

    pub fn n_items(&self) -> usize {
        self.item_means.rows()
    }

    pub fn item_mean(&self, item: ItemId) -> &[f64] {
        self.item_means.row(item as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tf = TensorFile::new();
        tf.set_meta("kind", "pmf");
        tf.set_meta("n_items", self.n_items());
        tf.set_meta("dim", self.dim());
        tf.set_meta("noise_var", self.noise_var);
        tf.set_meta("prior_var", self.prior_var);
        tf.push_tensor("item_means", self.item_means.clone());
        tf.push_tensor("item_cov_diag", self.item_cov_diag.clone());
        tf.write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tf = TensorFile::read_file(path)?;
        if tf.meta("kind")? != "pmf" {
            return Err(Error::Checkpoint("not a pmf checkpoint".into()));
        }
        let n_items = tf.meta_usize("n_items")?;
        let dim = tf.meta_usize("dim")?;
        Ok(PmfModel {
            item_means: tf.take_tensor("item_means", n_items, dim)?,
            item_cov_diag: tf.take_tensor("item_cov_diag", n_items, dim)?,
            noise_var: tf.meta_f64("noise_var")?,
            prior_var: tf.meta_f64("prior_var")?,
        })
    }
}

/// Per-user Gaussian belief over latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfPosterior {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl PmfPosterior {
    /// The cold-start prior N(0, σ_u² I).
    pub fn prior(dim: usize, prior_var: f64) -> Self {
        let mut cov = Matrix::identity(dim);
        cov.scale(prior_var);
        PmfPosterior { mean: vec![0.0; dim], cov }
    }

    pub fn predicted(&self, item_mean: &[f64]) -> f64 {
        dot(&self.mean, item_mean)
    }
}

/// Closed-form conjugate update after observing `rating` for an item with
/// fixed factor `nu`:
/// `Σ' = (Σ⁻¹ + ννᵀ/σ²)⁻¹`, `μ' = Σ'(Σ⁻¹μ + ν r/σ²)`,
/// computed in rank-1 (Kalman) form so Σ stays exactly symmetric.
pub fn posterior_update(
    post: &PmfPosterior,
    nu: &[f64],
    rating: f64,
    noise_var: f64,
) -> Result<PmfPosterior> {
    let d = post.mean.len();
    if nu.len() != d || post.cov.rows() != d || post.cov.cols() != d {
        return Err(Error::shape(format!(
            "posterior dim {d} vs item dim {} / cov {}x{}",
            nu.len(),
            post.cov.rows(),
            post.cov.cols()
        )));
    }
    // The precision-form update assumes Σ is invertible.
    cholesky(&SpdMatrix::new(post.cov.clone())?)
        .map_err(|_| Error::numeric("singular posterior covariance"))?;

    let mut sv = vec![0.0; d];
    for i in 0..d {
        sv[i] = dot(post.cov.row(i), nu);
    }
    let denom = noise_var + dot(nu, &sv);
    let gain: Vec<f64> = sv.iter().map(|v| v / denom).collect();
    let residual = rating - dot(nu, &post.mean);

    let mean: Vec<f64> = post.mean.iter().zip(&gain).map(|(m, k)| m + k * residual).collect();
    let mut cov = post.cov.clone();
    for i in 0..d {
        for j in 0..d {
            cov.add_at(i, j, -sv[i] * sv[j] / denom);
        }
    }
    Ok(PmfPosterior { mean, cov })
}

/// Thompson sampling: draw the user vector from the posterior and each
/// item vector from its (diagonal) posterior, then take the argmax of the
/// sampled inner products over the valid set, ties to the lowest id.
pub fn thompson_select(
    post: &PmfPosterior,
    model: &PmfModel,
    valid: &[ItemId],
    rng: &mut ChaCha8Rng,
) -> Result<ItemId> {
    if valid.is_empty() {
        return Err(Error::protocol("cannot select from an empty valid set"));
    }
    let user = sample_gaussian(&post.mean, &SpdMatrix::new(post.cov.clone())?, rng)?;
    let mut best = valid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &item in valid {
        let mean = model.item_mean(item);
        let var = model.item_cov_diag.row(item as usize);
        let mut score = 0.0;
        for k in 0..model.dim() {
            let q: f64 = mean[k] + var[k].max(0.0).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            score += user[k] * q;
        }
        if score > best_score {
            best = item;
            best_score = score;
        }
    }
    Ok(best)
}

/// GLM-UCB: argmax of `ρ(μᵀν_i) + c √(log t) ‖ν_i‖_{2,Σ}` over the valid
/// set, ties to the lowest id. At t = 1 the bonus vanishes.
pub fn glm_ucb_select(
    post: &PmfPosterior,
    model: &PmfModel,
    valid: &[ItemId],
    c: f64,
    t: usize,
) -> Result<ItemId> {
    if valid.is_empty() {
        return Err(Error::protocol("cannot select from an empty valid set"));
    }
    if t < 1 {
        return Err(Error::value("GLM-UCB needs t >= 1"));
    }
    let log_t = (t as f64).ln();
    let mut best = valid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &item in valid {
        let nu = model.item_mean(item);
        let mut quad = 0.0;
        for i in 0..post.cov.rows() {
            quad += nu[i] * dot(post.cov.row(i), nu);
        }
        let score = sigmoid(post.predicted(nu)) + c * log_t.sqrt() * quad.max(0.0).sqrt();
        if score > best_score {
            best = item;
            best_score = score;
        }
    }
    Ok(best)
}

/// ε-greedy over the posterior-mean scores μᵀν.
pub fn eps_greedy_select(
    post: &PmfPosterior,
    model: &PmfModel,
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
    Ok(greedy_mean_select(post, model, valid))
}

fn greedy_mean_select(post: &PmfPosterior, model: &PmfModel, valid: &[ItemId]) -> ItemId {
    let mut best = valid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &item in valid {
        let score = post.predicted(model.item_mean(item));
        if score > best_score {
            best = item;
            best_score = score;
        }
    }
    best
}

/// Fit PMF by alternating regularized least squares (the MAP estimate for
/// the Gaussian likelihood with zero-mean Gaussian priors) on the training
/// users' ratings. Item covariances come from the posterior of the final
/// user-fixed regression, kept diagonal.
pub fn fit_pmf(
    log: &RatingLog,
    train_users: &BTreeSet<UserId>,
    dim: usize,
    noise_var: f64,
    prior_var: f64,
    iters: usize,
    seed: u64,
) -> Result<PmfModel> {
    if dim < 1 {
        return Err(Error::value("latent dimension must be >= 1"));
    }
    if train_users.is_empty() {
        return Err(Error::value("cannot fit PMF with no training users"));
    }
    let users: Vec<UserId> = train_users.iter().copied().collect();
    let n_items = log.n_items();
    let lambda = noise_var / prior_var;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut item_means = Matrix::from_fn(n_items, dim, |_, _| rng.gen_range(-bound..bound));
    let mut user_means = Matrix::from_fn(users.len(), dim, |_, _| rng.gen_range(-bound..bound));

    // Per-item observation lists (index into `users`, rating).
    let mut item_obs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
    for (uidx, &user) in users.iter().enumerate() {
        for (&item, &rating) in log.user_items(user) {
            item_obs[item as usize].push((uidx, rating as f64));
        }
    }

    for _ in 0..iters {
        // Users given items.
        for (uidx, &user) in users.iter().enumerate() {
            solve_ridge_row(
                user_means.row_mut(uidx),
                log.user_items(user).iter().map(|(&i, &r)| (item_means.row(i as usize), r as f64)),
                lambda,
            )?;
        }
        // Items given users.
        for item in 0..n_items {
            let rows: Vec<(&[f64], f64)> =
                item_obs[item].iter().map(|&(uidx, r)| (user_means.row(uidx), r)).collect();
            solve_ridge_row(item_means.row_mut(item), rows.into_iter(), lambda)?;
        }
    }

    // Ψ_i = (Σ_u p pᵀ/σ² + I/σ_u²)⁻¹, diagonal approximation.
    let mut item_cov_diag = Matrix::zeros(n_items, dim);
    for item in 0..n_items {
        let mut precision = Matrix::identity(dim);
        precision.scale(1.0 / prior_var);
        for &(uidx, _) in &item_obs[item] {
            let p = user_means.row(uidx);
            for i in 0..dim {
                for j in 0..dim {
                    precision.add_at(i, j, p[i] * p[j] / noise_var);
                }
            }
        }
        let cov = spd_inverse(&SpdMatrix::new(precision)?)?;
        for k in 0..dim {
            item_cov_diag.set(item, k, cov.get(k, k));
        }
    }

    Ok(PmfModel { item_means, item_cov_diag, noise_var, prior_var })
}

/// In-place ridge solve: row ← (Σ x xᵀ + λI)⁻¹ Σ x r over the
/// observations; rows with no observations shrink to zero.
fn solve_ridge_row<'a>(
    row: &mut [f64],
    obs: impl Iterator<Item = (&'a [f64], f64)>,
    lambda: f64,
) -> Result<()> {
    let d = row.len();
    let mut gram = Matrix::identity(d);
    gram.scale(lambda);
    let mut rhs = vec![0.0; d];
    let mut any = false;
    for (x, r) in obs {
        any = true;
        for i in 0..d {
            for j in 0..d {
                gram.add_at(i, j, x[i] * x[j]);
            }
            rhs[i] += x[i] * r;
        }
    }
    if !any {
        row.fill(0.0);
        return Ok(());
    }
    let sol = spd_solve(&SpdMatrix::new(gram)?, &rhs)?;
    row.copy_from_slice(&sol);
    Ok(())
}

/// MAP objective the alternating sweeps descend:
/// Σ (r − pᵀq)² + λ(Σ‖p‖² + Σ‖q‖²). Exposed for monotonicity checks.
pub fn pmf_objective(
    log: &RatingLog,
    users: &[UserId],
    user_means: &Matrix,
    item_means: &Matrix,
    lambda: f64,
) -> f64 {
    let mut loss = 0.0;
    for (uidx, &user) in users.iter().enumerate() {
        for (&item, &rating) in log.user_items(user) {
            let err = rating as f64 - dot(user_means.row(uidx), item_means.row(item as usize));
            loss += err * err;
        }
        loss += lambda * dot(user_means.row(uidx), user_means.row(uidx));
    }
    for i in 0..item_means.rows() {
        loss += lambda * dot(item_means.row(i), item_means.row(i));
    }
    loss
}

/// Rating-count table behind the popularity baseline.
#[derive(Debug, Clone)]
pub struct PopTable {
    counts: Vec<u32>,
}

impl PopTable {
    pub fn from_log(log: &RatingLog, users: &BTreeSet<UserId>) -> Self {
        PopTable { counts: log.item_rating_counts(Some(users)) }
    }

    pub fn count(&self, item: ItemId) -> u32 {
        self.counts[item as usize]
    }

    /// Most-rated valid item, ties to the lowest id.
    pub fn select(&self, valid: &[ItemId]) -> Result<ItemId> {
        if valid.is_empty() {
            return Err(Error::protocol("cannot select from an empty valid set"));
        }
        let mut best = valid[0];
        for &item in &valid[1..] {
            if self.counts[item as usize] > self.counts[best as usize] {
                best = item;
            }
        }
        Ok(best)
    }
}

// ---------------------------------------------------------------------------
// Policy wrappers for the evaluation runner.
// ---------------------------------------------------------------------------

/// Uniform choice over the valid set.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn episode(&self) -> Box<dyn EpisodePolicy + '_> {
        struct Ep;
        impl EpisodePolicy for Ep {
            fn select(&mut self, _s: &SupportState, valid: &[ItemId], rng: &mut ChaCha8Rng) -> Result<ItemId> {
                if valid.is_empty() {
                    return Err(Error::protocol("cannot select from an empty valid set"));
                }
                Ok(valid[rng.gen_range(0..valid.len())])
            }
        }
        Box::new(Ep)
    }
}

/// Most-rated-first baseline.
pub struct PopPolicy {
    table: PopTable,
}

impl PopPolicy {
    pub fn new(table: PopTable) -> Self {
        PopPolicy { table }
    }
}

impl Policy for PopPolicy {
    fn episode(&self) -> Box<dyn EpisodePolicy + '_> {
        struct Ep<'a>(&'a PopTable);
        impl EpisodePolicy for Ep<'_> {
            fn select(&mut self, _s: &SupportState, valid: &[ItemId], _r: &mut ChaCha8Rng) -> Result<ItemId> {
                self.0.select(valid)
            }
        }
        Box::new(Ep(&self.table))
    }
}

/// How a PMF-backed policy picks items.
#[derive(Debug, Clone, Copy)]
pub enum PmfStrategy {
    /// Always greedy on μᵀν (the interactive MF baseline).
    Greedy,
    EpsGreedy { epsilon: f64 },
    Thompson,
    GlmUcb { c: f64 },
}

/// PMF-posterior policy: each episode starts from the cold-start prior and
/// performs the conjugate update after every observed rating.
pub struct PmfPolicy<'a> {
    model: &'a PmfModel,
    strategy: PmfStrategy,
}

impl<'a> PmfPolicy<'a> {
    pub fn new(model: &'a PmfModel, strategy: PmfStrategy) -> Self {
        PmfPolicy { model, strategy }
    }
}

impl Policy for PmfPolicy<'_> {
    fn episode(&self) -> Box<dyn EpisodePolicy + '_> {
        Box::new(PmfEpisode {
            model: self.model,
            strategy: self.strategy,
            post: PmfPosterior::prior(self.model.dim(), self.model.prior_var),
            t: 1,
        })
    }
}

struct PmfEpisode<'a> {
    model: &'a PmfModel,
    strategy: PmfStrategy,
    post: PmfPosterior,
    t: usize,
}

impl EpisodePolicy for PmfEpisode<'_> {
    fn select(&mut self, _s: &SupportState, valid: &[ItemId], rng: &mut ChaCha8Rng) -> Result<ItemId> {
        if valid.is_empty() {
            return Err(Error::protocol("cannot select from an empty valid set"));
        }
        match self.strategy {
            PmfStrategy::Greedy => Ok(greedy_mean_select(&self.post, self.model, valid)),
            PmfStrategy::EpsGreedy { epsilon } => {
                eps_greedy_select(&self.post, self.model, valid, epsilon, rng)
            }
            PmfStrategy::Thompson => thompson_select(&self.post, self.model, valid, rng),
            PmfStrategy::GlmUcb { c } => glm_ucb_select(&self.post, self.model, valid, c, self.t),
        }
    }

    fn observe(&mut self, item: ItemId, rating: u8) {
        self.post = posterior_update(
            &self.post,
            self.model.item_mean(item),
            rating as f64,
            self.model.noise_var,
        )
        .expect("posterior update cannot fail after a valid selection");
        self.t += 1;
    }
}

/// The non-learning reference policies: uniform random, popularity, and
/// greedy MF with per-interaction posterior updates.
pub fn baseline_policies<'m>(
    log: &RatingLog,
    split: &UserSplit,
    model: &'m PmfModel,
) -> Result<(RandomPolicy, PopPolicy, PmfPolicy<'m>)> {
    if split.train.is_empty() {
        return Err(Error::value("baseline policies need a non-empty training split"));
    }
    Ok((
        RandomPolicy,
        PopPolicy::new(PopTable::from_log(log, &split.train)),
        PmfPolicy::new(model, PmfStrategy::Greedy),
    ))
}
