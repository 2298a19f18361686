//! Interaction logs, long-tailed sequence datasets and minibatch sampling.
//!
//! Token ids are contiguous `1..=M` ordered by training frequency (id 1 is
//! the most frequent); id 0 is padding. Each user owns exactly one training
//! sequence and one held-out test target, so the privacy unit is the user.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Rng;

/// Padding token id.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogFormat {
    /// `user<TAB>item<TAB>timestamp`
    Tsv,
    /// `user::item::rating::timestamp`, rating ignored.
    MovielensDat,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(LogFormat::Tsv),
            "movielens-dat" => Ok(LogFormat::MovielensDat),
            other => Err(Error::InvalidArgument(format!("unknown log format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub warnings: Vec<String>,
}

fn parse_line(line: &str, format: LogFormat) -> Option<Interaction> {
    let fields: Vec<&str> = match format {
        LogFormat::Tsv => line.split('\t').collect(),
        LogFormat::MovielensDat => line.split("::").collect(),
    };
    let (u, i, t) = match (format, fields.as_slice()) {
        (LogFormat::Tsv, [u, i, t]) => (u, i, t),
        (LogFormat::MovielensDat, [u, i, _rating, t]) => (u, i, t),
        _ => return None,
    };
    Some(Interaction {
        user: u.trim().parse().ok()?,
        item: i.trim().parse().ok()?,
        timestamp: t.trim().parse().ok()?,
    })
}

/// Parses an interaction log. Blank lines are skipped; malformed lines are
/// counted and, when `strict`, turned into an error. Duplicate
/// `(user, item, timestamp)` triples are dropped.
pub fn ingest_interactions<R: BufRead>(
    source: R,
    format: LogFormat,
    strict: bool,
) -> Result<(InteractionLog, IngestReport)> {
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format) {
            Some(rec) => {
                if seen.insert(rec) {
                    records.push(rec);
                } else {
                    report.duplicates += 1;
                }
            }
            None => {
                if strict {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("cannot parse {line:?} as {format:?}"),
                    });
                }
                report.malformed += 1;
            }
        }
    }
    report.records = records.len();
    if records.is_empty() {
        report.warnings.push("empty interaction log".into());
    }
    if report.malformed > 0 {
        report
            .warnings
            .push(format!("{} malformed lines skipped", report.malformed));
    }
    Ok((InteractionLog { records }, report))
}

/// Public per-token statistics of the training sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// Occurrence count of token `i + 1` across training sequences.
    pub counts: Vec<usize>,
    /// `counts[i] / total`
    pub p: Vec<f64>,
    /// Fraction of training sequences containing token `i + 1`.
    pub sequence_rate: Vec<f64>,
    pub total: usize,
    pub n_sequences: usize,
}

impl FrequencyTable {
    pub fn from_sequences(vocab_size: usize, sequences: &[Vec<usize>]) -> Self {
        let mut counts = vec![0usize; vocab_size];
        let mut containing = vec![0usize; vocab_size];
        let mut mark = vec![usize::MAX; vocab_size];
        for (s, seq) in sequences.iter().enumerate() {
            for &t in seq {
                counts[t - 1] += 1;
                if mark[t - 1] != s {
                    mark[t - 1] = s;
                    containing[t - 1] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let n = sequences.len();
        FrequencyTable {
            p: counts
                .iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect(),
            sequence_rate: containing
                .iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            counts,
            total,
            n_sequences: n,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    /// Raw user ids, ascending.
    pub users: Vec<u64>,
    /// Chronological training tokens per user, at most `max_len` long.
    pub sequences: Vec<Vec<usize>>,
    /// Held-out final token per user.
    pub test_targets: Vec<usize>,
    /// Raw item id of token `t` at index `t - 1`.
    pub item_ids: Vec<u64>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub frequencies: FrequencyTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub min_count: usize,
    pub max_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            min_count: 5,
            max_len: 50,
        }
    }
}

/// Drops users and items with fewer than `min_count` interactions until
/// nothing changes.
pub fn filter_to_fixpoint(log: &InteractionLog, min_count: usize) -> InteractionLog {
    let mut records = log.records.clone();
    loop {
        let mut per_user: HashMap<u64, usize> = HashMap::new();
        let mut per_item: HashMap<u64, usize> = HashMap::new();
        for r in &records {
            *per_user.entry(r.user).or_default() += 1;
            *per_item.entry(r.item).or_default() += 1;
        }
        let before = records.len();
        records.retain(|r| per_user[&r.user] >= min_count && per_item[&r.item] >= min_count);
        if records.len() == before {
            return InteractionLog { records };
        }
    }
}

/// Builds the sequence dataset: fixpoint filtering, chronological ordering
/// (ties by raw item id), last-token test split, most-recent-window
/// truncation, and frequency-ranked token ids.
///
/// Items that survive filtering but never occur in any truncated training
/// sequence are removed and the build repeats, so every token has a strictly
/// positive training frequency.
pub fn build_dataset(log: &InteractionLog, config: DatasetConfig) -> Result<SequenceDataset> {
    if log.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    let mut current = log.clone();
    loop {
        let filtered = filter_to_fixpoint(&current, config.min_count.max(2));
        if filtered.records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut by_user: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
        for r in filtered.records {
            by_user.entry(r.user).or_default().push(r);
        }
        let mut raw_train: Vec<Vec<u64>> = Vec::with_capacity(by_user.len());
        let mut raw_test = Vec::with_capacity(by_user.len());
        let mut all_items = BTreeSet::new();
        for recs in by_user.values_mut() {
            recs.sort_by_key(|r| (r.timestamp, r.item));
            let items: Vec<u64> = recs.iter().map(|r| r.item).collect();
            all_items.extend(items.iter().copied());
            let (last, train) = items.split_last().expect("filtered user has interactions");
            let start = train.len().saturating_sub(config.max_len);
            raw_train.push(train[start..].to_vec());
            raw_test.push(*last);
        }
        let mut train_counts: BTreeMap<u64, usize> = BTreeMap::new();
        for seq in &raw_train {
            for &i in seq {
                *train_counts.entry(i).or_default() += 1;
            }
        }
        let unseen: BTreeSet<u64> = all_items
            .iter()
            .filter(|i| !train_counts.contains_key(i))
            .copied()
            .collect();
        if !unseen.is_empty() {
            current
                .records
                .retain(|r| !unseen.contains(&r.item));
            continue;
        }
        let mut ranked: Vec<(u64, usize)> = train_counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let item_ids: Vec<u64> = ranked.iter().map(|&(i, _)| i).collect();
        let token_of: HashMap<u64, usize> =
            item_ids.iter().enumerate().map(|(t, &i)| (i, t + 1)).collect();
        let sequences: Vec<Vec<usize>> = raw_train
            .iter()
            .map(|s| s.iter().map(|i| token_of[i]).collect())
            .collect();
        let test_targets = raw_test.iter().map(|i| token_of[i]).collect();
        let vocab_size = item_ids.len();
        let frequencies = FrequencyTable::from_sequences(vocab_size, &sequences);
        return Ok(SequenceDataset {
            users: by_user.keys().copied().collect(),
            sequences,
            test_targets,
            item_ids,
            vocab_size,
            max_len: config.max_len,
            frequencies,
        });
    }
}

/// Recomputes frequencies over training tokens only.
pub fn token_frequencies(dataset: &SequenceDataset) -> FrequencyTable {
    FrequencyTable::from_sequences(dataset.vocab_size, &dataset.sequences)
}

impl SequenceDataset {
    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    /// Interaction log equivalent to this dataset, using token ids as item
    /// ids and positions as timestamps.
    pub fn to_interaction_log(&self) -> InteractionLog {
        let mut records = Vec::new();
        for (u, (seq, &target)) in self.sequences.iter().zip(&self.test_targets).enumerate() {
            for (t, &tok) in seq.iter().chain(std::iter::once(&target)).enumerate() {
                records.push(Interaction {
                    user: self.users[u],
                    item: tok as u64,
                    timestamp: t as i64,
                });
            }
        }
        InteractionLog { records }
    }

    pub fn summary(&self) -> DatasetSummary {
        let interactions = self.frequencies.total + self.test_targets.len();
        let m = self.vocab_size;
        let head = |frac: f64| {
            let k = ((m as f64 * frac).ceil() as usize).clamp(1, m);
            // ids are frequency ranked
            self.frequencies.counts[..k].iter().sum::<usize>() as f64
                / self.frequencies.total.max(1) as f64
        };
        DatasetSummary {
            vocab_size: m,
            users: self.n_users(),
            interactions,
            density: interactions as f64 / (self.n_users() as f64 * m as f64),
            avg_sequence_length: self.frequencies.total as f64 / self.n_users().max(1) as f64,
            head_mass_top10pct: head(0.1),
            head_mass_top20pct: head(0.2),
            tail_mass_bottom50pct: 1.0 - head(0.5),
            max_token_frequency: self.frequencies.p.first().copied().unwrap_or(0.0),
            min_token_frequency: self.frequencies.p.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub vocab_size: usize,
    pub users: usize,
    pub interactions: usize,
    pub density: f64,
    pub avg_sequence_length: f64,
    pub head_mass_top10pct: f64,
    pub head_mass_top20pct: f64,
    pub tail_mass_bottom50pct: f64,
    pub max_token_frequency: f64,
    pub min_token_frequency: f64,
}

/// Left-padded token matrix with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `B×L`, row major, 0 = padding.
    pub token_ids: Vec<usize>,
    /// `B×L`; `targets[b, t]` is the token following `token_ids[b, t]`, 0 where none.
    pub targets: Vec<usize>,
    /// Dataset row of each sample.
    pub users: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl SequenceBatch {
    /// Training rows: inputs `s[..n-1]`, targets `s[1..]`, both left padded.
    pub fn from_sequences(seqs: &[&[usize]], users: Vec<usize>, seq_len: usize) -> Self {
        let b = seqs.len();
        let mut token_ids = vec![PAD; b * seq_len];
        let mut targets = vec![PAD; b * seq_len];
        for (row, seq) in seqs.iter().enumerate() {
            let seq = &seq[seq.len().saturating_sub(seq_len + 1)..];
            if seq.len() < 2 {
                continue;
            }
            let n = seq.len() - 1;
            let off = row * seq_len + seq_len - n;
            token_ids[off..off + n].copy_from_slice(&seq[..n]);
            targets[off..off + n].copy_from_slice(&seq[1..]);
        }
        SequenceBatch {
            token_ids,
            targets,
            users,
            batch_size: b,
            seq_len,
        }
    }

    /// Evaluation rows: the whole sequence left padded, no targets.
    pub fn for_inference(seqs: &[&[usize]], users: Vec<usize>, seq_len: usize) -> Self {
        let b = seqs.len();
        let mut token_ids = vec![PAD; b * seq_len];
        for (row, seq) in seqs.iter().enumerate() {
            let seq = &seq[seq.len().saturating_sub(seq_len)..];
            let off = row * seq_len + seq_len - seq.len();
            token_ids[off..off + seq.len()].copy_from_slice(seq);
        }
        SequenceBatch {
            token_ids,
            targets: vec![PAD; b * seq_len],
            users,
            batch_size: b,
            seq_len,
        }
    }

    /// Sub-batch made of the listed rows.
    pub fn select(&self, rows: &[usize]) -> SequenceBatch {
        let l = self.seq_len;
        let mut token_ids = Vec::with_capacity(rows.len() * l);
        let mut targets = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            token_ids.extend_from_slice(&self.token_ids[r * l..(r + 1) * l]);
            targets.extend_from_slice(&self.targets[r * l..(r + 1) * l]);
        }
        SequenceBatch {
            token_ids,
            targets,
            users: rows.iter().map(|&r| self.users[r]).collect(),
            batch_size: rows.len(),
            seq_len: l,
        }
    }

    pub fn tokens(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn row_targets(&self, b: usize) -> &[usize] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Each user independently with probability `q`.
    Poisson(f64),
    /// `B` users without replacement.
    Uniform(usize),
}

/// Draws one minibatch; every sampled user contributes exactly one row.
/// An empty Poisson draw is redrawn.
pub fn sample_minibatch(
    dataset: &SequenceDataset,
    mode: SamplingMode,
    rng: &mut Rng,
) -> Result<SequenceBatch> {
    let n = dataset.n_users();
    let rows: Vec<usize> = match mode {
        SamplingMode::Poisson(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidArgument(format!("sampling rate {q} not in (0, 1]")));
            }
            loop {
                let rows: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < q).collect();
                if !rows.is_empty() {
                    break rows;
                }
            }
        }
        SamplingMode::Uniform(b) => {
            if b == 0 || b > n {
                return Err(Error::InvalidArgument(format!(
                    "batch size {b} not in 1..={n}"
                )));
            }
            let mut rows = rand::seq::index::sample(rng, n, b).into_vec();
            rows.sort_unstable();
            rows
        }
    };
    let seqs: Vec<&[usize]> = rows.iter().map(|&r| dataset.sequences[r].as_slice()).collect();
    Ok(SequenceBatch::from_sequences(&seqs, rows, dataset.max_len))
}

/// Parameters of the synthetic long-tailed corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub vocab_size: usize,
    /// Zipf exponent of the item popularity law.
    pub exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Items are grouped round-robin by popularity rank into this many clusters.
    pub clusters: usize,
    /// Probability that the next item is drawn from the current item's cluster.
    pub stay_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 2000,
            vocab_size: 200,
            exponent: 1.1,
            min_len: 12,
            max_len: 30,
            clusters: 20,
            stay_prob: 0.7,
        }
    }
}

/// Zipf-distributed interaction log with short-range sequential structure:
/// successive items tend to share a cluster. Item `k` has popularity weight
/// `k^-exponent`.
pub fn zipf_synthetic(config: &SyntheticConfig, rng: &mut Rng) -> Result<InteractionLog> {
    let m = config.vocab_size;
    if m == 0 || config.users == 0 || config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::InvalidArgument(format!("synthetic config {config:?}")));
    }
    let k = config.clusters.clamp(1, m);
    let weights: Vec<f64> = (1..=m).map(|r| (r as f64).powf(-config.exponent)).collect();
    let global = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (c..m).step_by(k).collect())
        .collect();
    let local: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|items| WeightedIndex::new(items.iter().map(|&i| weights[i])).expect("nonempty cluster"))
        .collect();
    let mut records = Vec::new();
    for u in 0..config.users {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut item = global.sample(rng);
        for t in 0..len {
            if t > 0 {
                item = if rng.random::<f64>() < config.stay_prob {
                    let c = item % k;
                    members[c][local[c].sample(rng)]
                } else {
                    global.sample(rng)
                };
            }
            records.push(Interaction {
                user: u as u64 + 1,
                item: item as u64 + 1,
                timestamp: t as i64,
            });
        }
    }
    Ok(InteractionLog { records })
}
