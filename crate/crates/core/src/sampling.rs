//! Alternating positive/negative training stream with frequency-of-use
//! selection of the negatives.
//!
//! Each epoch pairs every positive with one negative. Negatives are drawn
//! without replacement, each with probability proportional to
//! `1 / (c_i - c_min + 1)`, where `c_i` counts how often negative `i` has
//! been used and `c_min` is the smallest count among all negatives. Weights
//! are recomputed after every draw.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type SampleId = usize;

#[derive(Clone, Debug)]
pub struct SamplerState {
    usage_counts: BTreeMap<SampleId, u64>,
    rng_seed: u64,
    rng: ChaCha8Rng,
    pub freq_enabled: bool,
}

impl SamplerState {
    pub fn new(rng_seed: u64, freq_enabled: bool) -> Self {
        Self {
            usage_counts: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            freq_enabled,
        }
    }

    /// Starts from pre-existing usage counts.
    pub fn with_counts(rng_seed: u64, freq_enabled: bool, counts: impl IntoIterator<Item = (SampleId, u64)>) -> Self {
        let mut s = Self::new(rng_seed, freq_enabled);
        s.usage_counts.extend(counts);
        s
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn count(&self, id: SampleId) -> u64 {
        self.usage_counts.get(&id).copied().unwrap_or(0)
    }

    pub fn usage_counts(&self) -> &BTreeMap<SampleId, u64> {
        &self.usage_counts
    }

    pub fn total_usage(&self) -> u64 {
        self.usage_counts.values().sum()
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn record(&mut self, id: SampleId) {
        *self.usage_counts.entry(id).or_insert(0) += 1;
    }

    /// Writes `id<TAB>count` rows for `ids` (unused ids get 0), with an
    /// optional name column.
    pub fn write_usage_counts(&self, path: &Path, ids: &[SampleId], names: Option<&[String]>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match names {
            Some(_) => writeln!(f, "id\tname\tcount")?,
            None => writeln!(f, "id\tcount")?,
        }
        for &id in ids {
            match names {
                Some(n) => writeln!(f, "{id}\t{}\t{}", n.get(id).map(String::as_str).unwrap_or(""), self.count(id))?,
                None => writeln!(f, "{id}\t{}", self.count(id))?,
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Picks `k` negatives, without replacement inside each pass over the pool.
/// When `k` exceeds the pool, further passes start over. Usage counts are
/// incremented for every returned id.
pub fn select_negatives(state: &mut SamplerState, negatives: &[SampleId], k: usize) -> Result<Vec<SampleId>> {
    if negatives.is_empty() {
        return Err(Error::Data("no negative samples to select from".into()));
    }
    if k == 0 {
        return Err(Error::Data("must select at least one negative".into()));
    }
    let mut selected = Vec::with_capacity(k);
    while selected.len() < k {
        let mut pool = negatives.to_vec();
        let take = (k - selected.len()).min(pool.len());
        for _ in 0..take {
            let idx = if state.freq_enabled {
                let floor = negatives.iter().map(|&id| state.count(id)).min().unwrap_or(0);
                let weights = pool.iter().map(|&id| 1.0 / ((state.count(id) - floor) as f64 + 1.0));
                let dist = WeightedIndex::new(weights).map_err(|e| Error::Data(e.to_string()))?;
                dist.sample(state.rng())
            } else {
                state.rng().random_range(0..pool.len())
            };
            let id = pool.remove(idx);
            state.record(id);
            selected.push(id);
        }
    }
    Ok(selected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamItem {
    Positive(SampleId),
    Negative(SampleId),
}

impl StreamItem {
    pub fn is_positive(&self) -> bool {
        matches!(self, StreamItem::Positive(_))
    }

    pub fn id(&self) -> SampleId {
        match *self {
            StreamItem::Positive(id) | StreamItem::Negative(id) => id,
        }
    }
}

/// One epoch: shuffled positives interleaved P, N, P, N, ... with `|P|`
/// selected negatives.
pub fn build_epoch_stream(positives: &[SampleId], negatives: &[SampleId], state: &mut SamplerState) -> Result<Vec<StreamItem>> {
    if positives.is_empty() {
        return Err(Error::Data("no positive samples: the alternating stream needs at least one".into()));
    }
    let mut pos = positives.to_vec();
    pos.shuffle(state.rng());
    let neg = select_negatives(state, negatives, pos.len())?;
    Ok(pos
        .into_iter()
        .zip(neg)
        .flat_map(|(p, n)| [StreamItem::Positive(p), StreamItem::Negative(n)])
        .collect())
}

/// Consecutive chunks of the stream, in order.
pub fn batches(stream: &[StreamItem], batch_size: usize) -> impl Iterator<Item = &[StreamItem]> {
    stream.chunks(batch_size.max(1))
}
