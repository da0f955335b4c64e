use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn meta(sample_id: usize, identity_id: usize, clothing_id: usize, camera_id: usize) -> ItemMeta {
    ItemMeta {
        sample_id,
        identity_id,
        clothing_id,
        camera_id,
    }
}

#[test]
fn mask_rules() {
    let q = meta(0, 1, 0, 1);
    let g = [meta(1, 1, 0, 1), meta(2, 1, 0, 2), meta(3, 1, 1, 2), meta(4, 2, 0, 1)];
    assert_eq!(valid_mask(&q, &g, Protocol::Standard), vec![false, true, true, true]);
    assert_eq!(valid_mask(&q, &g, Protocol::ClothChanging), vec![false, false, true, true]);
}

#[test]
fn single_query_perfect_and_hand_ap() {
    let q = [meta(0, 1, 0, 0)];
    let g = [meta(1, 1, 1, 1), meta(2, 2, 0, 1)];
    let r = cmc_map(&q, &g, &[vec![1.0, 0.0]], &[vec![1.0, 0.1], vec![0.0, 1.0]], Protocol::Standard).unwrap();
    assert_eq!((r.rank(1), r.map), (1.0, 1.0));

    // Relevance pattern [0, 1, 1] in ranked order.
    let g = [meta(1, 2, 0, 1), meta(2, 1, 1, 1), meta(3, 1, 1, 2)];
    let ge = [vec![1.0, 0.0], vec![1.0, 0.5], vec![1.0, 1.0]];
    let r = cmc_map(&q, &g, &[vec![1.0, 0.0]], &ge, Protocol::Standard).unwrap();
    assert!((r.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(r.rank(1), 0.0);
    assert_eq!(r.rank(2), 1.0);
}

#[test]
fn queries_without_positives_are_skipped() {
    let q = [meta(0, 1, 0, 0), meta(5, 9, 0, 0)];
    let g = [meta(1, 1, 1, 1), meta(2, 2, 0, 1)];
    let e = vec![vec![1.0, 0.0]; 2];
    let r = cmc_map(&q, &g, &e, &e, Protocol::Standard).unwrap();
    assert_eq!((r.num_queries, r.num_skipped), (1, 1));
    let only = [meta(5, 9, 0, 0)];
    assert!(cmc_map(&only, &g, &e[..1], &e, Protocol::Standard).is_err());
    let nan = [vec![f64::NAN, 0.0], vec![1.0, 0.0]];
    assert!(matches!(cmc_map(&q, &g, &e, &nan, Protocol::Standard), Err(Error::NonFinite(_))));
}

/// O(Q * G^2): the rank of each valid gallery item is the number of valid
/// items strictly ahead of it.
fn naive(queries: &[ItemMeta], gallery: &[ItemMeta], qe: &[Vec<f64>], ge: &[Vec<f64>], protocol: Protocol) -> (Vec<f64>, f64, usize) {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut hits = vec![0usize; gallery.len()];
    let mut aps = 0.0;
    let mut n = 0;
    for (q, e) in queries.iter().zip(qe) {
        let e = unit(e);
        let d: Vec<f64> = ge.iter().map(|g| 1.0 - unit(g).iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()).collect();
        let valid: Vec<usize> = (0..gallery.len())
            .filter(|&j| {
                let g = &gallery[j];
                let same = g.identity_id == q.identity_id;
                !(same && g.camera_id == q.camera_id) && !(protocol == Protocol::ClothChanging && same && g.clothing_id == q.clothing_id)
            })
            .collect();
        let rank_of = |j: usize| valid.iter().filter(|&&k| d[k] < d[j] || (d[k] == d[j] && k < j)).count();
        let mut pos: Vec<usize> = valid.iter().copied().filter(|&j| gallery[j].identity_id == q.identity_id).map(rank_of).collect();
        if pos.is_empty() {
            continue;
        }
        pos.sort_unstable();
        let mut ap = 0.0;
        for (i, &r) in pos.iter().enumerate() {
            ap += (i + 1) as f64 / (r + 1) as f64;
        }
        aps += ap / pos.len() as f64;
        hits[pos[0]] += 1;
        n += 1;
    }
    let mut cmc = Vec::new();
    let mut acc = 0;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / n as f64);
    }
    (cmc, aps / n as f64, n)
}

type Instance = (Vec<ItemMeta>, Vec<ItemMeta>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let nq = rng.random_range(1..=30);
    let ng = rng.random_range(10..=60);
    let dim = 4;
    let mk = |rng: &mut ChaCha8Rng, id: usize| meta(id, rng.random_range(0..6), rng.random_range(0..3), rng.random_range(0..3));
    let q: Vec<ItemMeta> = (0..nq).map(|i| mk(rng, i)).collect();
    let g: Vec<ItemMeta> = (0..ng).map(|i| mk(rng, 1000 + i)).collect();
    // Coarse values create exact distance ties.
    let mut emb = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect()).collect() };
    let qe = emb(nq);
    let mut ge = emb(ng);
    for e in ge.iter_mut() {
        if e.iter().all(|&v| v == 0.0) {
            e[0] = 1.0;
        }
    }
    (q, g, qe, ge)
}

#[test]
fn matches_naive_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 50 {
        let (q, g, qe, ge) = random_instance(&mut rng);
        for p in Protocol::ALL {
            let (cmc, map, n) = naive(&q, &g, &qe, &ge, p);
            match cmc_map(&q, &g, &qe, &ge, p) {
                Ok(r) => {
                    assert_eq!(r.cmc, cmc);
                    assert_eq!(r.map, map);
                    assert_eq!(r.num_queries, n);
                }
                Err(_) => assert_eq!(n, 0),
            }
        }
        checked += 1;
    }
}

#[test]
fn cmc_is_monotone_and_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let (q, g, qe, ge) = random_instance(&mut rng);
        let qe: Vec<Vec<f64>> = qe.into_iter().map(|v| v.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect()).collect();
        let Ok(r) = cmc_map(&q, &g, &qe, &ge, Protocol::Standard) else { continue };
        assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
        // Rotation in the (0, 1) plane.
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |v: &Vec<f64>| {
            let mut w = v.clone();
            w[0] = c * v[0] - s * v[1];
            w[1] = s * v[0] + c * v[1];
            w
        };
        let r2 = cmc_map(&q, &g, &qe.iter().map(rot).collect::<Vec<_>>(), &ge.iter().map(rot).collect::<Vec<_>>(), Protocol::Standard).unwrap();
        assert!((r.map - r2.map).abs() < 1e-9);
    }
}

#[test]
fn cloth_changing_positives_are_a_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, g, _, _) = random_instance(&mut rng);
    for query in &q {
        let std = valid_mask(query, &g, Protocol::Standard);
        let cc = valid_mask(query, &g, Protocol::ClothChanging);
        for j in 0..g.len() {
            if cc[j] && g[j].identity_id == query.identity_id {
                assert!(std[j]);
            }
        }
    }
}

#[test]
fn report_keys_and_csv() {
    let q = [meta(0, 1, 0, 0)];
    let g = [meta(1, 1, 1, 1), meta(2, 2, 0, 1)];
    let r = cmc_map(&q, &g, &[vec![1.0, 0.0]], &[vec![1.0, 0.1], vec![0.0, 1.0]], Protocol::ClothChanging).unwrap();
    let json = serde_json::to_value(r.report()).unwrap();
    for key in ["protocol", "Rank-1", "Rank-5", "Rank-10", "mAP", "num_queries", "num_skipped"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["protocol"], "cloth_changing");
    assert_eq!(json["Rank-10"], 100.0);
    assert_eq!(per_query_csv(&r).lines().nth(1).unwrap(), "0,1,1,1");
    assert_eq!("cloth-changing".parse::<Protocol>().unwrap(), Protocol::ClothChanging);
}
