//! Rating-log ingestion and the offline interactive environment.
//!
//! Logged users are replayed as rating oracles: an episode walks one user,
//! the policy recommends items the user actually rated in the log, and the
//! logged rating is returned as feedback. Candidate items never repeat
//! within an episode.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::SATISFIED_MIN_RATING;

/// Dense user index, 0..N-1.
pub type UserId = u32;
/// Dense item index, 0..M-1.
pub type ItemId = u32;

pub const DEFAULT_R_MAX: u8 = 5;

/// One (user, item, rating) record with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub user: UserId,
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: Option<i64>,
}

/// The immutable set of rating records plus index maps.
///
/// Ids are re-indexed densely in first-occurrence order; the original ids
/// are retained so a log serializes back to its source form. Duplicate
/// (user, item) pairs are collapsed keeping the latest rating (by
/// timestamp, then file order).
#[derive(Debug, Clone, PartialEq)]
pub struct RatingLog {
    records: Vec<RatingRecord>,
    per_user: Vec<BTreeMap<ItemId, u8>>,
    user_orig: Vec<u64>,
    item_orig: Vec<u64>,
    r_max: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingsFormat {
    /// `UserID::MovieID::Rating::Timestamp`, one record per line.
    MovielensDat,
    /// `user,item,rating[,timestamp]` with a header line.
    Csv,
}

impl RatingsFormat {
    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "movielens_dat" => Ok(RatingsFormat::MovielensDat),
            "csv" => Ok(RatingsFormat::Csv),
            other => Err(Error::value(format!("unknown ratings format '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RatingsFormat::MovielensDat => "movielens_dat",
            RatingsFormat::Csv => "csv",
        }
    }
}

/// Parse a rating stream into a [`RatingLog`].
///
/// Malformed lines fail with their 1-based line number; ratings outside
/// `[1, r_max]` are value errors. Empty lines are skipped.
pub fn parse_ratings(reader: impl BufRead, format: RatingsFormat, r_max: u8) -> Result<RatingLog> {
    let mut records: Vec<RatingRecord> = Vec::new();
    let mut user_orig: Vec<u64> = Vec::new();
    let mut item_orig: Vec<u64> = Vec::new();
    let mut user_map: HashMap<u64, UserId> = HashMap::new();
    let mut item_map: HashMap<u64, ItemId> = HashMap::new();
    let mut seen: HashMap<(UserId, ItemId), usize> = HashMap::new();

    let mut header_checked = format != RatingsFormat::Csv;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        if !header_checked {
            let h = line.trim().to_ascii_lowercase();
            if h == "user,item,rating" || h == "user,item,rating,timestamp" {
                header_checked = true;
                continue;
            }
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected header 'user,item,rating[,timestamp]', got '{line}'"),
            });
        }

        let (orig_u, orig_i, rating, timestamp) = parse_line(line, format, lineno)?;
        if rating < 1 || rating > r_max {
            return Err(Error::value(format!(
                "rating {rating} outside [1, {r_max}] at line {lineno}"
            )));
        }

        let next_user = user_orig.len() as UserId;
        let u = *user_map.entry(orig_u).or_insert_with(|| {
            user_orig.push(orig_u);
            next_user
        });
        let next_item = item_orig.len() as ItemId;
        let i = *item_map.entry(orig_i).or_insert_with(|| {
            item_orig.push(orig_i);
            next_item
        });

        let rec = RatingRecord { user: u, item: i, rating, timestamp };
        match seen.get(&(u, i)) {
            Some(&pos) => {
                let old = &records[pos];
                let new_wins = match (old.timestamp, rec.timestamp) {
                    (Some(a), Some(b)) => b >= a,
                    _ => true,
                };
                if new_wins {
                    records[pos] = rec;
                }
            }
            None => {
                seen.insert((u, i), records.len());
                records.push(rec);
            }
        }
    }

    let n_users = user_orig.len();
    let mut per_user: Vec<BTreeMap<ItemId, u8>> = vec![BTreeMap::new(); n_users];
    for rec in &records {
        per_user[rec.user as usize].insert(rec.item, rec.rating);
    }

    Ok(RatingLog { records, per_user, user_orig, item_orig, r_max })
}

fn parse_line(
    line: &str,
    format: RatingsFormat,
    lineno: usize,
) -> Result<(u64, u64, u8, Option<i64>)> {
    let perr = |msg: String| Error::Parse { line: lineno, msg };
    let fields: Vec<&str> = match format {
        RatingsFormat::MovielensDat => line.split("::").collect(),
        RatingsFormat::Csv => line.split(',').collect(),
    };
    let arity_ok = match format {
        RatingsFormat::MovielensDat => fields.len() == 4,
        RatingsFormat::Csv => fields.len() == 3 || fields.len() == 4,
    };
    if !arity_ok {
        return Err(perr(format!("expected 3-4 fields, got {}: '{line}'", fields.len())));
    }
    let user: u64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| perr(format!("bad user id '{}'", fields[0])))?;
    let item: u64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| perr(format!("bad item id '{}'", fields[1])))?;
    let rating: u8 = fields[2]
        .trim()
        .parse()
        .map_err(|_| perr(format!("bad rating '{}'", fields[2])))?;
    let timestamp = match fields.get(3) {
        Some(f) if !f.trim().is_empty() => Some(
            f.trim()
                .parse::<i64>()
                .map_err(|_| perr(format!("bad timestamp '{f}'")))?,
        ),
        _ => None,
    };
    Ok((user, item, rating, timestamp))
}

impl RatingLog {
    pub fn n_users(&self) -> usize {
        self.user_orig.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_orig.len()
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    /// Items rated by a user, with ratings, in item order.
    pub fn user_items(&self, user: UserId) -> &BTreeMap<ItemId, u8> {
        &self.per_user[user as usize]
    }

    pub fn rating(&self, user: UserId, item: ItemId) -> Option<u8> {
        self.per_user.get(user as usize).and_then(|m| m.get(&item).copied())
    }

    /// Number of the user's logged items rated at the satisfied threshold or above.
    pub fn satisfied_count(&self, user: UserId) -> usize {
        self.per_user[user as usize]
            .values()
            .filter(|&&r| r >= SATISFIED_MIN_RATING)
            .count()
    }

    /// Per-item count of ratings across the given users (all users if None).
    pub fn item_rating_counts(&self, users: Option<&BTreeSet<UserId>>) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_items()];
        for rec in &self.records {
            if users.map_or(true, |s| s.contains(&rec.user)) {
                counts[rec.item as usize] += 1;
            }
        }
        counts
    }

    pub fn original_user(&self, user: UserId) -> u64 {
        self.user_orig[user as usize]
    }

    pub fn original_item(&self, item: ItemId) -> u64 {
        self.item_orig[item as usize]
    }

    pub fn dense_item(&self, original: u64) -> Option<ItemId> {
        self.item_orig.iter().position(|&o| o == original).map(|i| i as ItemId)
    }

    /// Serialize back to the given format; `parse → serialize → parse`
    /// reproduces an identical log.
    pub fn serialize(&self, mut w: impl Write, format: RatingsFormat) -> Result<()> {
        match format {
            RatingsFormat::MovielensDat => {
                for rec in &self.records {
                    let ts = rec.timestamp.ok_or_else(|| {
                        Error::value("movielens_dat serialization requires timestamps")
                    })?;
                    writeln!(
                        w,
                        "{}::{}::{}::{}",
                        self.user_orig[rec.user as usize],
                        self.item_orig[rec.item as usize],
                        rec.rating,
                        ts
                    )?;
                }
            }
            RatingsFormat::Csv => {
                let any_ts = self.records.iter().any(|r| r.timestamp.is_some());
                if any_ts {
                    writeln!(w, "user,item,rating,timestamp")?;
                } else {
                    writeln!(w, "user,item,rating")?;
                }
                for rec in &self.records {
                    let u = self.user_orig[rec.user as usize];
                    let i = self.item_orig[rec.item as usize];
                    match (any_ts, rec.timestamp) {
                        (true, Some(ts)) => writeln!(w, "{u},{i},{},{ts}", rec.rating)?,
                        (true, None) => writeln!(w, "{u},{i},{},", rec.rating)?,
                        (false, _) => writeln!(w, "{u},{i},{}", rec.rating)?,
                    }
                }
            }
        }
        Ok(())
    }
}

/// Disjoint train/valid/test user sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: BTreeSet<UserId>,
    pub valid: BTreeSet<UserId>,
    pub test: BTreeSet<UserId>,
    pub seed: u64,
}

/// Partition users by seeded shuffle into train/valid/test fractions.
pub fn split_users(log: &RatingLog, fractions: (f64, f64, f64), seed: u64) -> Result<UserSplit> {
    let (f_train, f_valid, f_test) = fractions;
    if (f_train + f_valid + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::value(format!(
            "split fractions must sum to 1, got {f_train} + {f_valid} + {f_test}"
        )));
    }
    if f_train < 0.0 || f_valid < 0.0 || f_test < 0.0 {
        return Err(Error::value("split fractions must be nonnegative"));
    }
    let n = log.n_users();
    if n == 0 {
        return Err(Error::value("cannot split an empty log"));
    }

    let mut ids: Vec<UserId> = (0..n as UserId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_train = ((f_train * n as f64).round() as usize).min(n);
    let n_valid = ((f_valid * n as f64).round() as usize).min(n - n_train);
    let train: BTreeSet<UserId> = ids[..n_train].iter().copied().collect();
    let valid: BTreeSet<UserId> = ids[n_train..n_train + n_valid].iter().copied().collect();
    let test: BTreeSet<UserId> = ids[n_train + n_valid..].iter().copied().collect();
    Ok(UserSplit { train, valid, test, seed })
}

/// The per-episode interaction history, stored per rating channel.
///
/// Channel `z` holds the items rated `z`, in recommendation order; the
/// flat event list preserves the interleaving so the full support set can
/// be reconstructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportState {
    channels: Vec<Vec<ItemId>>,
    events: Vec<(ItemId, u8)>,
}

impl SupportState {
    pub fn new(r_max: u8) -> Self {
        SupportState { channels: vec![Vec::new(); r_max as usize], events: Vec::new() }
    }

    pub fn r_max(&self) -> u8 {
        self.channels.len() as u8
    }

    /// Number of observed interactions (t − 1).
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn push(&mut self, item: ItemId, rating: u8) {
        assert!(
            rating >= 1 && rating <= self.r_max(),
            "rating {rating} outside [1, {}]",
            self.r_max()
        );
        self.channels[(rating - 1) as usize].push(item);
        self.events.push((item, rating));
    }

    /// Items rated `z` (1-based channel index), in recommendation order.
    pub fn channel(&self, z: u8) -> &[ItemId] {
        &self.channels[(z - 1) as usize]
    }

    /// All (item, rating) events in recommendation order.
    pub fn events(&self) -> &[(ItemId, u8)] {
        &self.events
    }
}

/// Per-episode environment state for one replayed user.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub user: UserId,
    /// Current timestep t, starting at 1.
    pub step: usize,
    pub history: SupportState,
    /// Candidate items not yet recommended this episode, ascending.
    pub remaining: Vec<ItemId>,
    pub horizon: usize,
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rating: u8,
    pub satisfied: bool,
    pub next: EnvState,
    pub done: bool,
}

/// Start an episode for a logged user. The candidate set is every item the
/// user rated in the log.
pub fn env_reset(log: &RatingLog, user: UserId, horizon: usize) -> Result<EnvState> {
    if (user as usize) >= log.n_users() {
        return Err(Error::protocol(format!("unknown user {user}")));
    }
    let items = log.user_items(user);
    if items.is_empty() {
        return Err(Error::protocol(format!("user {user} has no rated items")));
    }
    Ok(EnvState {
        user,
        step: 1,
        history: SupportState::new(log.r_max()),
        remaining: items.keys().copied().collect(),
        horizon,
    })
}

/// Recommend `item` to the episode's user and observe the logged rating.
///
/// The item must be in `state.remaining`; recommending an unrated or
/// repeated item is a protocol error.
pub fn env_step(log: &RatingLog, state: &EnvState, item: ItemId) -> Result<StepOutcome> {
    let pos = state
        .remaining
        .binary_search(&item)
        .map_err(|_| Error::protocol(format!("item {item} not in remaining candidate set")))?;
    let rating = log.rating(state.user, item).ok_or_else(|| {
        Error::protocol(format!("no logged rating for user {} item {item}", state.user))
    })?;

    let mut next = state.clone();
    next.remaining.remove(pos);
    next.history.push(item, rating);
    next.step += 1;
    let done = state.step >= state.horizon || next.remaining.is_empty();

    Ok(StepOutcome { rating, satisfied: rating >= SATISFIED_MIN_RATING, next, done })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_from_csv(text: &str) -> RatingLog {
        parse_ratings(text.as_bytes(), RatingsFormat::Csv, DEFAULT_R_MAX).unwrap()
    }

    #[test]
    fn parses_movielens_line_with_dense_ids() {
        let text = "1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978220000\n";
        let log = parse_ratings(text.as_bytes(), RatingsFormat::MovielensDat, 5).unwrap();
        assert_eq!(log.n_users(), 2);
        assert_eq!(log.n_items(), 2);
        let first = &log.records()[0];
        assert_eq!((first.user, first.item, first.rating), (0, 0, 5));
        assert_eq!(first.timestamp, Some(978300760));
        assert_eq!(log.original_user(0), 1);
        assert_eq!(log.original_item(0), 1193);
        assert_eq!(log.rating(1, 0), Some(4));
    }

    #[test]
    fn parses_csv_without_timestamp() {
        let log = log_from_csv("user,item,rating\n7,42,3\n");
        let rec = &log.records()[0];
        assert_eq!((rec.user, rec.item, rec.rating, rec.timestamp), (0, 0, 3, None));
    }

    #[test]
    fn rejects_out_of_range_rating() {
        let text = "1::1193::9::0\n";
        let err = parse_ratings(text.as_bytes(), RatingsFormat::MovielensDat, 5).unwrap_err();
        assert!(matches!(err, Error::Value(_)), "got {err:?}");
    }

    #[test]
    fn parse_error_names_line() {
        let text = "user,item,rating\n1,2,3\nnot-a-line\n";
        let err = parse_ratings(text.as_bytes(), RatingsFormat::Csv, 5).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_requires_header() {
        let err = parse_ratings("1,2,3\n".as_bytes(), RatingsFormat::Csv, 5).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicate_keeps_latest_by_timestamp() {
        let text = "user,item,rating,timestamp\n1,10,2,100\n1,10,5,300\n1,10,3,200\n";
        let log = log_from_csv(text);
        assert_eq!(log.records().len(), 1);
        assert_eq!(log.rating(0, 0), Some(5));
    }

    #[test]
    fn duplicate_without_timestamp_keeps_file_order() {
        let text = "user,item,rating\n1,10,2\n1,10,4\n";
        let log = log_from_csv(text);
        assert_eq!(log.records().len(), 1);
        assert_eq!(log.rating(0, 0), Some(4));
    }

    #[test]
    fn split_exact_on_round_fractions() {
        let mut text = String::from("user,item,rating\n");
        for u in 0..100 {
            text.push_str(&format!("{u},1,3\n"));
        }
        let log = log_from_csv(&text);
        let split = split_users(&log, (0.85, 0.05, 0.10), 1).unwrap();
        assert_eq!(split.train.len(), 85);
        assert_eq!(split.valid.len(), 5);
        assert_eq!(split.test.len(), 10);

        let again = split_users(&log, (0.85, 0.05, 0.10), 1).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let log = log_from_csv("user,item,rating\n1,1,3\n");
        assert!(split_users(&log, (0.5, 0.5, 0.5), 1).is_err());
    }

    #[test]
    fn split_rejects_empty_log() {
        let log = log_from_csv("user,item,rating\n");
        assert!(split_users(&log, (0.8, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn env_reset_builds_candidate_set() {
        let mut text = String::from("user,item,rating\n");
        for i in 0..20 {
            text.push_str(&format!("3,{i},4\n"));
        }
        let log = log_from_csv(&text);
        let state = env_reset(&log, 0, 40).unwrap();
        assert_eq!(state.remaining.len(), 20);
        assert_eq!(state.step, 1);
        assert_eq!(state.horizon, 40);
        assert!(state.history.is_empty());
    }

    #[test]
    fn env_reset_rejects_unknown_user() {
        let log = log_from_csv("user,item,rating\n1,1,3\n");
        assert!(env_reset(&log, 9999, 40).is_err());
    }

    #[test]
    fn env_step_returns_logged_rating_and_threshold() {
        let log = log_from_csv("user,item,rating\n1,10,5\n1,11,3\n");
        let state = env_reset(&log, 0, 40).unwrap();
        let out = env_step(&log, &state, 0).unwrap();
        assert_eq!(out.rating, 5);
        assert!(out.satisfied);
        let out2 = env_step(&log, &out.next, 1).unwrap();
        assert_eq!(out2.rating, 3);
        assert!(!out2.satisfied);
        assert!(out2.done, "episode exhausts the candidate set");
    }

    #[test]
    fn env_step_rejects_repeat() {
        let log = log_from_csv("user,item,rating\n1,10,5\n1,11,3\n");
        let state = env_reset(&log, 0, 40).unwrap();
        let out = env_step(&log, &state, 0).unwrap();
        let err = env_step(&log, &out.next, 0).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn env_episode_ends_at_horizon() {
        let mut text = String::from("user,item,rating\n");
        for i in 0..10 {
            text.push_str(&format!("1,{i},4\n"));
        }
        let log = log_from_csv(&text);
        let mut state = env_reset(&log, 0, 3).unwrap();
        let mut dones = Vec::new();
        for item in 0..3 {
            let out = env_step(&log, &state, item).unwrap();
            dones.push(out.done);
            state = out.next;
        }
        assert_eq!(dones, vec![false, false, true]);
        assert_eq!(state.history.len(), 3);
        assert_eq!(state.remaining.len(), 7);
    }

    #[test]
    fn history_channels_partition_events() {
        let log = log_from_csv("user,item,rating\n1,0,5\n1,1,3\n1,2,5\n1,3,1\n");
        let mut state = env_reset(&log, 0, 40).unwrap();
        for item in [0, 1, 2, 3] {
            state = env_step(&log, &state, item).unwrap().next;
        }
        assert_eq!(state.history.channel(5), &[0, 2]);
        assert_eq!(state.history.channel(3), &[1]);
        assert_eq!(state.history.channel(1), &[3]);
        assert_eq!(state.history.channel(2), &[] as &[ItemId]);
        assert_eq!(state.history.events(), &[(0, 5), (1, 3), (2, 5), (3, 1)]);
    }

    proptest! {
        #[test]
        fn split_is_partition_for_every_seed(seed in 0u64..500, n in 1usize..60) {
            let mut text = String::from("user,item,rating\n");
            for u in 0..n {
                text.push_str(&format!("{u},1,3\n"));
            }
            let log = log_from_csv(&text);
            let split = split_users(&log, (0.85, 0.05, 0.10), seed).unwrap();
            let mut all = BTreeSet::new();
            all.extend(&split.train);
            all.extend(&split.valid);
            all.extend(&split.test);
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(split.train.len() + split.valid.len() + split.test.len(), n);
            prop_assert_eq!(all, (0..n as UserId).collect::<BTreeSet<_>>());
        }

        #[test]
        fn parse_serialize_roundtrip(
            entries in proptest::collection::vec(
                (0u64..30, 0u64..40, 1u8..=5, proptest::option::of(0i64..10_000)),
                1..80,
            )
        ) {
            let mut text = String::from("user,item,rating,timestamp\n");
            for (u, i, r, ts) in &entries {
                match ts {
                    Some(ts) => text.push_str(&format!("{u},{i},{r},{ts}\n")),
                    None => text.push_str(&format!("{u},{i},{r},\n")),
                }
            }
            let log = parse_ratings(text.as_bytes(), RatingsFormat::Csv, 5).unwrap();
            let mut buf = Vec::new();
            log.serialize(&mut buf, RatingsFormat::Csv).unwrap();
            let log2 = parse_ratings(buf.as_slice(), RatingsFormat::Csv, 5).unwrap();
            prop_assert_eq!(log, log2);
        }

        #[test]
        fn episode_history_is_subset_of_log(seed in 0u64..200) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut text = String::from("user,item,rating\n");
            let n_items = rng.gen_range(1..15);
            for i in 0..n_items {
                let r = rng.gen_range(1..=5);
                text.push_str(&format!("1,{i},{r}\n"));
            }
            let log = parse_ratings(text.as_bytes(), RatingsFormat::Csv, 5).unwrap();
            let horizon = rng.gen_range(1..20usize);
            let mut state = env_reset(&log, 0, horizon).unwrap();
            let mut steps = 0;
            loop {
                let k = rng.gen_range(0..state.remaining.len());
                let item = state.remaining[k];
                let before = state.remaining.len();
                let out = env_step(&log, &state, item).unwrap();
                prop_assert_eq!(out.next.remaining.len(), before - 1);
                state = out.next;
                steps += 1;
                if out.done {
                    break;
                }
            }
            prop_assert_eq!(steps, horizon.min(n_items));
            for &(item, rating) in state.history.events() {
                prop_assert_eq!(log.rating(0, item), Some(rating));
            }
        }
    }
}
