//! Seeded synthetic rating logs with planted taste structure.
//!
//! Users belong to archetypes, items to genres. An archetype loves two
//! genres, tolerates two, and dislikes the rest; ratings are the archetype
//! affinity plus a per-item quality offset and noise, rounded onto 1..5.
//! Users rate loved genres (and better items) more often, mimicking the
//! selection bias of real logs. Genre popularity is balanced across
//! archetypes, so beating the popularity baseline requires identifying
//! the user's archetype rather than learning one global ranking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_env::{parse_ratings, RatingLog, RatingsFormat};
use crate::error::Result;
use crate::metrics::TopicCatalog;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Number of genres; archetypes match it one-to-one.
    pub n_genres: usize,
    pub ratings_per_user: usize,
    pub seed: u64,
    /// Mean rating for a loved / neutral / disliked genre.
    pub affinity_loved: f64,
    pub affinity_neutral: f64,
    pub affinity_disliked: f64,
    /// Rating noise and per-item quality spread.
    pub noise_sd: f64,
    pub quality_sd: f64,
    /// Strength of the rate-what-you-like selection bias.
    pub selection_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 300,
            n_items: 400,
            n_genres: 8,
            ratings_per_user: 120,
            seed: 7,
            affinity_loved: 4.3,
            affinity_neutral: 3.2,
            affinity_disliked: 2.2,
            noise_sd: 0.7,
            quality_sd: 0.3,
            selection_bias: 0.5,
        }
    }
}

/// Generated files, ready to write to disk or parse in memory.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub ratings_csv: String,
    pub topics_csv: String,
}

impl SynthData {
    pub fn parse(&self) -> Result<(RatingLog, TopicCatalog)> {
        let log = parse_ratings(self.ratings_csv.as_bytes(), RatingsFormat::Csv, 5)?;
        let topics = TopicCatalog::from_csv(self.topics_csv.as_bytes(), &log)?;
        Ok((log, topics))
    }
}

fn affinity(cfg: &SynthConfig, archetype: usize, genre: usize) -> f64 {
    let offset = (genre + cfg.n_genres - archetype) % cfg.n_genres;
    match offset {
        0 | 1 => cfg.affinity_loved,
        2 | 3 => cfg.affinity_neutral,
        _ => cfg.affinity_disliked,
    }
}

/// Generate a rating log plus a single-genre-per-item topic file.
pub fn generate(cfg: &SynthConfig) -> SynthData {
    assert!(cfg.n_genres >= 1 && cfg.n_items >= cfg.n_genres);
    assert!(cfg.ratings_per_user <= cfg.n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let genres: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_genres).collect();
    let quality: Vec<f64> = (0..cfg.n_items)
        .map(|_| cfg.quality_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut ratings_csv = String::from("user,item,rating,timestamp\n");
    for user in 0..cfg.n_users {
        let archetype = rng.gen_range(0..cfg.n_genres);

        // Weighted sampling without replacement (Efraimidis–Spirakis):
        // keep the top-k items by u^(1/w).
        let mut keyed: Vec<(f64, usize)> = (0..cfg.n_items)
            .map(|item| {
                let mean = affinity(cfg, archetype, genres[item]) + quality[item];
                let w = (cfg.selection_bias * (mean - 3.0)).exp();
                let u: f64 = rng.gen_range(0.0f64..1.0).max(f64::MIN_POSITIVE);
                (u.powf(1.0 / w), item)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut chosen: Vec<usize> =
            keyed.iter().take(cfg.ratings_per_user).map(|&(_, i)| i).collect();
        chosen.sort_unstable();

        for (k, &item) in chosen.iter().enumerate() {
            let mean = affinity(cfg, archetype, genres[item]) + quality[item];
            let noise: f64 = cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
            let rating = (mean + noise).round().clamp(1.0, 5.0) as u8;
            let ts = (user * cfg.ratings_per_user + k) as i64;
            ratings_csv.push_str(&format!("{user},{item},{rating},{ts}\n"));
        }
    }

    let mut topics_csv = String::from("item,topic\n");
    for (item, &g) in genres.iter().enumerate() {
        topics_csv.push_str(&format!("{item},genre{g}\n"));
    }

    SynthData { ratings_csv, topics_csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SATISFIED_MIN_RATING;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { n_users: 20, n_items: 60, ratings_per_user: 30, ..Default::default() };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.ratings_csv, b.ratings_csv);
        assert_eq!(a.topics_csv, b.topics_csv);
    }

    #[test]
    fn parsed_log_has_requested_shape() {
        let cfg = SynthConfig { n_users: 25, n_items: 80, ratings_per_user: 40, ..Default::default() };
        let (log, topics) = generate(&cfg).parse().unwrap();
        assert_eq!(log.n_users(), 25);
        for u in 0..25 {
            assert_eq!(log.user_items(u).len(), 40);
        }
        assert!(log.n_items() <= 80);
        assert_eq!(topics.n_topics(), cfg.n_genres);
    }

    #[test]
    fn candidate_sets_have_moderate_satisfaction_rate() {
        let cfg = SynthConfig::default();
        let (log, _) = generate(&cfg).parse().unwrap();
        let mut sat = 0usize;
        let mut total = 0usize;
        for u in 0..log.n_users() as u32 {
            for (_, &r) in log.user_items(u) {
                total += 1;
                sat += (r >= SATISFIED_MIN_RATING) as usize;
            }
        }
        let rate = sat as f64 / total as f64;
        assert!(
            (0.35..0.75).contains(&rate),
            "selection-biased satisfied rate should be moderate, got {rate:.3}"
        );
    }

    #[test]
    fn loved_genres_rate_higher_than_disliked() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg);
        let (log, topics) = data.parse().unwrap();
        // Genre means across all users must spread: the max-genre mean per
        // user should exceed the min-genre mean by a clear margin.
        let mut margin_sum = 0.0;
        let mut counted = 0;
        for u in 0..log.n_users() as u32 {
            let mut by_genre: Vec<(f64, usize)> = vec![(0.0, 0); cfg.n_genres];
            for (&item, &r) in log.user_items(u) {
                let g = topics.topics(item)[0] as usize;
                by_genre[g].0 += r as f64;
                by_genre[g].1 += 1;
            }
            let means: Vec<f64> = by_genre
                .iter()
                .filter(|(_, n)| *n > 0)
                .map(|(s, n)| s / *n as f64)
                .collect();
            if means.len() >= 2 {
                let max = means.iter().cloned().fold(f64::MIN, f64::max);
                let min = means.iter().cloned().fold(f64::MAX, f64::min);
                margin_sum += max - min;
                counted += 1;
            }
        }
        let mean_margin = margin_sum / counted as f64;
        assert!(mean_margin > 1.0, "genre preference margin too small: {mean_margin:.3}");
    }
}
