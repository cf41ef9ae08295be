use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::meta::Params;
use crate::params::{Param, ParamSet};
use crate::prune::{merge_majority, PruneMask};
use crate::wire::RoundMessage;

/// SplitMix64 finalizer over a sequence of words; used to derive
/// independent stream seeds from (seed, round, client).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const SELECT_STREAM: u64 = u64::MAX;

/// Uniform sample of `k` distinct client ids out of `n_registry`, seeded
/// by `(seed, round)`, returned in ascending order.
pub fn select_clients(n_registry: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if n_registry == 0 {
        return Err(Error::Federation("client registry is empty".into()));
    }
    if k == 0 || k > n_registry {
        return Err(Error::Federation(format!(
            "clients_per_round must be in 1..={n_registry}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, round as u64, SELECT_STREAM]));
    let mut ids = rand::seq::index::sample(&mut rng, n_registry, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Aggregated global state after one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub params: Params,
    pub mask: PruneMask,
}

fn weighted_mean(sets: &[(&ParamSet, f64)]) -> ParamSet {
    let first = sets[0].0;
    first
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc = vec![0f64; p.data.len()];
            for (set, wk) in sets {
                for (a, &v) in acc.iter_mut().zip(&set.get(i).data) {
                    *a += wk * v as f64;
                }
            }
            Param::new(p.name.clone(), p.shape.clone(), acc.into_iter().map(|v| v as f32).collect())
        })
        .collect()
}

/// Sample-count weighted mean of every client's weights and logits, summed
/// in f64 in ascending client-id order, plus the strict-majority mask.
pub fn fedavg(messages: &[RoundMessage]) -> Result<Aggregate> {
    let mut sorted: Vec<&RoundMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.client_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::Federation("no client messages to aggregate".into()))?;
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Federation(format!("duplicate message from client {}", w[0].client_id)));
    }
    for m in &sorted[1..] {
        if m.geometry_hash != first.geometry_hash {
            return Err(Error::Federation(format!(
                "client {} reports geometry {:#018x}, expected {:#018x}",
                m.client_id, m.geometry_hash, first.geometry_hash
            )));
        }
        if let Some(name) = first
            .weights
            .schema_mismatch(&m.weights)
            .or_else(|| first.alpha.schema_mismatch(&m.alpha))
        {
            return Err(Error::SchemaMismatch(name));
        }
    }
    if let Some(m) = sorted.iter().find(|m| m.n_k == 0) {
        return Err(Error::Federation(format!("client {} reports n_k = 0", m.client_id)));
    }
    let total: f64 = sorted.iter().map(|m| m.n_k as f64).sum();
    let ws: Vec<(&ParamSet, f64)> = sorted.iter().map(|m| (&m.weights, m.n_k as f64 / total)).collect();
    let als: Vec<(&ParamSet, f64)> = sorted.iter().map(|m| (&m.alpha, m.n_k as f64 / total)).collect();
    let masks: Vec<&PruneMask> = sorted.iter().map(|m| &m.mask).collect();
    Ok(Aggregate {
        params: Params {
            w: weighted_mean(&ws),
            alpha: weighted_mean(&als),
        },
        mask: merge_majority(&masks)?,
    })
}
