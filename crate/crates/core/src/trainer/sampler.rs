//! Identity-balanced batches: `P` identities with `K` samples each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// One epoch of PK batches over `items` (`(sample_id, identity)` pairs).
///
/// Every identity's samples are shuffled and cut into chunks of `k`; short
/// chunks are topped up by drawing from the same identity with replacement.
/// Each batch takes one chunk from each of the `p` identities with the most
/// chunks left (random tie order). When fewer than `p` identities still hold
/// chunks, the batch is completed with fresh chunks from other identities,
/// so every sample appears at least once per epoch.
pub fn pk_sample<R: Rng>(items: &[(usize, usize)], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(sample, id) in items {
        by_id.entry(id).or_default().push(sample);
    }
    if p == 0 || k == 0 {
        return Err(Error::config("schedule.ids_per_batch", "ids_per_batch and instances_per_id must be >= 1"));
    }
    if p > by_id.len() {
        return Err(Error::config(
            "schedule.ids_per_batch",
            format!("{p} identities per batch but the training split has {}", by_id.len()),
        ));
    }
    let chunk_of = |samples: &[usize], rng: &mut R, order: &mut Vec<usize>| -> Vec<usize> {
        let mut c: Vec<usize> = order.drain(..order.len().min(k)).collect();
        while c.len() < k {
            c.push(samples[rng.random_range(0..samples.len())]);
        }
        c
    };
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let mut queues: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for &id in &ids {
        let samples = &by_id[&id];
        let mut order = samples.clone();
        order.shuffle(rng);
        let mut chunks = Vec::new();
        while !order.is_empty() {
            chunks.push(chunk_of(samples, rng, &mut order));
        }
        queues.insert(id, chunks);
    }
    let mut batches = Vec::new();
    loop {
        let mut live: Vec<usize> = ids.iter().copied().filter(|id| !queues[id].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        live.shuffle(rng);
        live.sort_by_key(|id| std::cmp::Reverse(queues[id].len()));
        let mut chosen: Vec<usize> = live.into_iter().take(p).collect();
        if chosen.len() < p {
            let mut rest: Vec<usize> = ids.iter().copied().filter(|id| !chosen.contains(id)).collect();
            rest.shuffle(rng);
            chosen.extend(rest.into_iter().take(p - chosen.len()));
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in chosen {
            let chunk = match queues.get_mut(&id).and_then(|q| q.pop()) {
                Some(c) => c,
                None => {
                    let samples = &by_id[&id];
                    let mut order = samples.clone();
                    order.shuffle(rng);
                    chunk_of(samples, rng, &mut order)
                }
            };
            batch.extend(chunk);
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn items(sizes: &[usize]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (id, &n) in sizes.iter().enumerate() {
            for j in 0..n {
                out.push((id * 100 + j, id));
            }
        }
        out
    }

    fn histogram(batch: &[usize], lookup: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in batch {
            let id = lookup.iter().find(|(x, _)| x == s).unwrap().1;
            *h.entry(id).or_insert(0) += 1;
        }
        h
    }

    #[test]
    fn batches_have_p_identities_with_k_each() {
        let data = items(&[5, 3, 7, 2, 9, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in pk_sample(&data, 4, 2, &mut rng).unwrap() {
            assert_eq!(batch.len(), 8);
            let h = histogram(&batch, &data);
            assert_eq!(h.len(), 4);
            assert!(h.values().all(|&c| c == 2));
        }
    }

    #[test]
    fn small_identities_repeat_their_images() {
        let data = items(&[1, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = pk_sample(&data, 2, 4, &mut rng).unwrap();
        for b in &batches {
            assert_eq!(b.iter().filter(|&&s| s == 0).count(), 4);
        }
    }

    #[test]
    fn every_sample_is_seen_every_epoch() {
        let data = items(&[18; 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut epochs_seen: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..100 {
            let seen: std::collections::BTreeSet<usize> = pk_sample(&data, 8, 4, &mut rng).unwrap().into_iter().flatten().collect();
            for s in seen {
                *epochs_seen.entry(s).or_insert(0) += 1;
            }
        }
        assert_eq!(epochs_seen.len(), data.len());
        assert!(epochs_seen.values().all(|&n| n >= 95));
    }

    #[test]
    fn oversized_requests_are_rejected() {
        let data = items(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pk_sample(&data, 3, 2, &mut rng).unwrap_err().is_config());
        assert!(pk_sample(&data, 2, 0, &mut rng).is_err());
    }
}
