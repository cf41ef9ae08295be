use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Dirichlet { alpha: f64 },
    LabelSkew { tau: usize },
}

/// Disjoint per-client index lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub client_shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.client_shards.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.client_shards.iter().map(Vec::len).collect()
    }

    /// One JSON object per client with its sorted indices.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for (client, shard) in self.client_shards.iter().enumerate() {
            let mut s = shard.clone();
            s.sort_unstable();
            out.push_str(&serde_json::json!({ "client": client, "indices": s }).to_string());
            out.push('\n');
        }
        out
    }
}

/// Indices of `indices` grouped by label, each group in input order.
fn by_class(labels: &[usize], indices: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_classes];
    for &i in indices {
        groups[labels[i]].push(i);
    }
    groups
}

fn n_classes_of(labels: &[usize], indices: &[usize]) -> usize {
    indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0)
}

/// Splits `n` into integer parts proportional to `p` (which sums to 1)
/// with largest-remainder rounding; ties go to the lower index.
fn largest_remainder(n: usize, p: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// For every class, draws client proportions from a symmetric Dirichlet
/// (normalized Gamma(alpha, 1) draws) and deals that class's shuffled
/// samples out accordingly. Plans with a shard below `min_size` are
/// redrawn up to `max_retries` times.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    indices: &[usize],
    n_clients: usize,
    alpha: f64,
    min_size: usize,
    max_retries: usize,
    rng: &mut R,
) -> Result<PartitionPlan, DataError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be at least 1".into()));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let groups = by_class(labels, indices, n_classes_of(labels, indices));
    let attempts = max_retries.max(1);
    for _ in 0..attempts {
        let mut shards = vec![Vec::new(); n_clients];
        let mut degenerate = false;
        for group in &groups {
            let mut g = group.clone();
            g.shuffle(rng);
            let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                degenerate = true;
                continue;
            }
            let p: Vec<f64> = draws.iter().map(|d| d / total).collect();
            let mut start = 0;
            for (k, c) in largest_remainder(g.len(), &p).into_iter().enumerate() {
                shards[k].extend_from_slice(&g[start..start + c]);
                start += c;
            }
        }
        if !degenerate && shards.iter().all(|s| s.len() >= min_size.max(1)) {
            return Ok(PartitionPlan {
                scheme: Scheme::Dirichlet { alpha },
                client_shards: shards,
            });
        }
    }
    Err(DataError::RetriesExhausted { attempts, min_size })
}

/// Assigns exactly `tau` classes to every client by walking a shuffled
/// class list round-robin, then gives each client the same number of
/// samples from each of its classes.
pub fn label_skew_partition<R: Rng + ?Sized>(
    labels: &[usize],
    indices: &[usize],
    n_clients: usize,
    tau: usize,
    rng: &mut R,
) -> Result<PartitionPlan, DataError> {
    let n_classes = n_classes_of(labels, indices);
    if tau == 0 || n_clients == 0 {
        return Err(DataError::InvalidArgument("tau and n_clients must be at least 1".into()));
    }
    if tau > n_classes {
        return Err(DataError::TauTooLarge { tau, n_classes });
    }
    let mut perm: Vec<usize> = (0..n_classes).collect();
    perm.shuffle(rng);
    let classes: Vec<Vec<usize>> = (0..n_clients)
        .map(|k| (0..tau).map(|t| perm[(k * tau + t) % n_classes]).collect())
        .collect();
    let mut holders = vec![0usize; n_classes];
    for cs in &classes {
        for &c in cs {
            holders[c] += 1;
        }
    }
    let mut groups = by_class(labels, indices, n_classes);
    for g in groups.iter_mut() {
        g.shuffle(rng);
    }
    let quota: Vec<usize> = classes
        .iter()
        .map(|cs| cs.iter().map(|&c| groups[c].len() / holders[c]).min().unwrap_or(0))
        .collect();
    if let Some(k) = quota.iter().position(|&q| q == 0) {
        return Err(DataError::InvalidArgument(format!(
            "client {k} would receive no samples; too few samples per class for {n_clients} clients at tau {tau}"
        )));
    }
    let mut cursor = vec![0usize; n_classes];
    let client_shards = classes
        .iter()
        .zip(&quota)
        .map(|(cs, &q)| {
            let mut shard = Vec::with_capacity(q * tau);
            for &c in cs {
                shard.extend_from_slice(&groups[c][cursor[c]..cursor[c] + q]);
                cursor[c] += q;
            }
            shard
        })
        .collect();
    Ok(PartitionPlan {
        scheme: Scheme::LabelSkew { tau },
        client_shards,
    })
}

/// Shannon entropy (nats) of the label distribution of `shard`.
pub fn label_entropy(labels: &[usize], shard: &[usize]) -> f64 {
    if shard.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &i in shard {
        *counts.entry(labels[i]).or_insert(0usize) += 1;
    }
    let n = shard.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
