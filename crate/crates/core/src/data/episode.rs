use rand::seq::SliceRandom;
use rand::Rng;

use super::DataError;

/// Disjoint support and query index sets drawn from one shard.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeIndices {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws `support_size + query_size` distinct shard entries. Samples are
/// dealt round-robin across the shard's classes (in shuffled class order),
/// then each class is split between support and query in proportion to
/// their sizes, so both sets see every drawn class.
pub fn sample_episode<R: Rng + ?Sized>(
    labels: &[usize],
    shard: &[usize],
    support_size: usize,
    query_size: usize,
    rng: &mut R,
) -> Result<EpisodeIndices, DataError> {
    let needed = support_size + query_size;
    if needed > shard.len() || support_size == 0 || query_size == 0 {
        return Err(DataError::ShardTooSmall {
            needed,
            available: shard.len(),
        });
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in shard {
        groups.entry(labels[i]).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    for g in groups.iter_mut() {
        g.shuffle(rng);
    }
    groups.shuffle(rng);

    let mut dealt = Vec::with_capacity(needed);
    let mut round = 0;
    while dealt.len() < needed {
        for g in &groups {
            if let Some(&i) = g.get(round) {
                dealt.push(i);
            }
        }
        round += 1;
    }
    // Split every class between the two sets in proportion to their sizes;
    // a per-class coin decides which set gets a class's first sample.
    let mut per_class: std::collections::HashMap<usize, (usize, usize, bool)> = Default::default();
    let mut support = Vec::with_capacity(support_size);
    let mut query = Vec::with_capacity(query_size);
    for i in dealt.into_iter().take(needed) {
        let (s, q, first) = per_class.entry(labels[i]).or_insert_with(|| (0, 0, rng.random()));
        let lhs = *s * query_size;
        let rhs = *q * support_size;
        let prefer_support = lhs < rhs || (lhs == rhs && *first);
        let to_support = query.len() == query_size || (prefer_support && support.len() < support_size);
        if to_support {
            support.push(i);
            *s += 1;
        } else {
            query.push(i);
            *q += 1;
        }
    }
    support.shuffle(rng);
    query.shuffle(rng);
    Ok(EpisodeIndices { support, query })
}
