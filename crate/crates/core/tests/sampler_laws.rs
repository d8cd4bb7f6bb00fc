use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcpl::sampling::{epoch_batches, rank_candidates, sample_mini_tracklets, sample_negative, SamplerConfig};

fn cfg(rho: f64, rank: usize) -> SamplerConfig {
    SamplerConfig { rho, rank, batch_size: 16 }
}

#[test]
fn mini_tracklets_are_disjoint_contiguous_and_equal_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let n = rng.random_range(2..60);
        let rho = rng.random_range(0.05..=0.5);
        let c = cfg(rho, 3);
        let Ok(pair) = sample_mini_tracklets(n, &c, &mut rng) else {
            continue;
        };
        let size = c.chunk_size(n);
        assert_eq!(pair.anchor.len(), size);
        assert_eq!(pair.positive.len(), size);
        assert!(pair.anchor.end <= n && pair.positive.end <= n);
        assert!(pair.anchor.end <= pair.positive.start || pair.positive.end <= pair.anchor.start);
        assert_eq!(pair.anchor.start % size, 0);
        assert_eq!(pair.positive.start % size, 0);
    }
}

#[test]
fn chunk_pairs_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 10_000;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..draws {
        let pair = sample_mini_tracklets(10, &cfg(0.2, 3), &mut rng).unwrap();
        let (a, p) = (pair.anchor.start / 2, pair.positive.start / 2);
        *counts.entry((a.min(p), a.max(p))).or_default() += 1;
    }
    assert_eq!(counts.len(), 10);
    for (pair, c) in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.1).abs() <= 0.01, "{pair:?}: {f}");
    }
}

#[test]
fn negative_ranks_are_uniform_over_the_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let embeddings: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64, 0.0]).collect();
    let batch: Vec<(usize, &[f64])> = embeddings.iter().enumerate().map(|(i, e)| (i, e.as_slice())).collect();
    let anchor = [0.0, 0.0];
    let draws = 10_000;
    let mut counts = [0usize; 17];
    for _ in 0..draws {
        let neg = sample_negative(0, &anchor, &batch, &cfg(0.2, 3), &mut rng).unwrap();
        // candidate ids 1.. sit at distance id, so the 1-based rank equals the id
        counts[neg] += 1;
    }
    for (rank, &c) in counts.iter().enumerate() {
        let f = c as f64 / draws as f64;
        if (3..=6).contains(&rank) {
            assert!((f - 0.25).abs() <= 0.02, "rank {rank}: {f}");
        } else {
            assert_eq!(c, 0, "rank {rank} drawn");
        }
    }
}

#[test]
fn small_batches_truncate_the_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embeddings: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    let batch: Vec<(usize, &[f64])> = embeddings.iter().enumerate().map(|(i, e)| (i, e.as_slice())).collect();
    for _ in 0..1000 {
        let neg = sample_negative(0, &[0.0], &batch, &cfg(0.2, 3), &mut rng).unwrap();
        assert!((3..=4).contains(&neg));
    }
}

proptest! {
    #[test]
    fn anchor_is_never_its_own_negative(seed in any::<u64>(), size in 2usize..12, rank in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings: Vec<Vec<f64>> = (0..size).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
        let batch: Vec<(usize, &[f64])> = embeddings.iter().enumerate().map(|(i, e)| (i * 7, e.as_slice())).collect();
        let anchor_id = 7 * rng.random_range(0..size);
        match sample_negative(anchor_id, &embeddings[anchor_id / 7], &batch, &cfg(0.2, rank), &mut rng) {
            Ok(neg) => prop_assert_ne!(neg, anchor_id),
            Err(_) => prop_assert!(size - 1 < rank),
        }
    }

    #[test]
    fn ranking_is_sorted_and_storage_order_free(seed in any::<u64>(), size in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings: Vec<Vec<f64>> = (0..size).map(|_| vec![rng.random_range(-1.0..1.0), 0.0]).collect();
        let mut cands: Vec<(usize, &[f64])> = embeddings.iter().enumerate().map(|(i, e)| (i, e.as_slice())).collect();
        let ranked = rank_candidates(&[0.0, 0.0], &cands);
        prop_assert!(ranked.windows(2).all(|w| w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        cands.reverse();
        prop_assert_eq!(rank_candidates(&[0.0, 0.0], &cands), ranked);
    }

    #[test]
    fn batches_partition_the_ids(seed in any::<u64>(), n in 1usize..100, b in 1usize..20) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = epoch_batches(&ids, b, &mut rng);
        prop_assert!(batches.iter().rev().skip(1).all(|x| x.len() == b));
        let mut all = batches.concat();
        all.sort();
        prop_assert_eq!(all, ids);
    }
}
