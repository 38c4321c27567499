use cmsc_core::nn::Tensor;
use cmsc_core::selector::{
    retained_count, scatter, scatter_backward, select, top_k, ImportanceMap, SparseFeaturePack,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRIDS: std::ops::RangeInclusive<usize> = 2..=8;

/// Rank rule: cell `i` survives when fewer than `k` cells beat it, where a
/// cell beats another by a larger score or, on a tie, by a lower index.
fn oracle_selected(values: &[f64], k: usize) -> Vec<usize> {
    (0..values.len())
        .filter(|&i| {
            let beaten_by = (0..values.len())
                .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
                .count();
            beaten_by < k
        })
        .collect()
}

fn tied_scores(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Few distinct levels so ties are common.
    (0..n)
        .map(|_| rng.random_range(1..5) as f64 / 5.0)
        .collect()
}

fn imp(h: usize, w: usize, values: Vec<f64>) -> ImportanceMap {
    ImportanceMap {
        height: h,
        width: w,
        values,
    }
}

#[test]
fn retained_count_matches_integer_ceiling() {
    for h in GRIDS {
        for w in GRIDS {
            let cells = h * w;
            for p in 1..=1000usize {
                let expected = (p * cells).div_ceil(1000);
                let k = retained_count(p as f64 / 1000.0, h, w).unwrap();
                assert_eq!(k, expected, "lambda {p}/1000 on {h}x{w}");
            }
        }
    }
}

#[test]
fn retained_count_rejects_out_of_range() {
    for bad in [0.0, -0.1, 1.0000001, f64::NAN, f64::INFINITY] {
        assert!(retained_count(bad, 4, 4).is_err(), "{bad}");
    }
    assert_eq!(retained_count(1.0, 4, 4).unwrap(), 16);
}

#[test]
fn top_k_matches_rank_oracle_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for h in GRIDS {
        for w in GRIDS {
            for _ in 0..4 {
                let v = tied_scores(h * w, &mut rng);
                for k in 1..=h * w {
                    assert_eq!(top_k(&v, k), oracle_selected(&v, k), "{h}x{w} k={k}");
                }
            }
        }
    }
}

#[test]
fn equal_scores_keep_lowest_indices() {
    for h in GRIDS {
        for w in GRIDS {
            let v = vec![0.5; h * w];
            for k in 1..=h * w {
                assert_eq!(top_k(&v, k), (0..k).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn scatter_inverts_gather_on_every_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 3;
    for h in GRIDS {
        for w in GRIDS {
            let map = Tensor::randn(&[h, w, c], 1.0, &mut rng);
            let scores = tied_scores(h * w, &mut rng);
            for p in [1, 6, 10, 25, 50, 100] {
                let lambda = p as f64 / 100.0;
                let (masked, pack) = select(&map, &imp(h, w, scores.clone()), lambda).unwrap();
                assert_eq!(pack.k(), retained_count(lambda, h, w).unwrap());
                assert_eq!(scatter(&pack, &pack.features).unwrap(), masked);
                assert_eq!(scatter_backward(&pack, &masked).unwrap(), pack.features);
                for (r, &i) in pack.indices.iter().enumerate() {
                    for ch in 0..c {
                        let want = map.data()[i * c + ch] * scores[i];
                        assert_eq!(pack.features.data()[r * c + ch], want);
                    }
                }
            }
        }
    }
}

#[test]
fn retained_sets_nest_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for h in GRIDS {
        for w in GRIDS {
            let scores = tied_scores(h * w, &mut rng);
            let map = Tensor::zeros(&[h, w, 1]);
            let mut prev: Vec<usize> = Vec::new();
            for p in 1..=100 {
                let (_, pack) = select(&map, &imp(h, w, scores.clone()), p as f64 / 100.0).unwrap();
                assert!(
                    prev.iter().all(|i| pack.indices.contains(i)),
                    "{h}x{w} at {p}%"
                );
                prev = pack.indices;
            }
            assert_eq!(prev.len(), h * w);
        }
    }
}

#[test]
fn pack_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = Tensor::randn(&[5, 7, 4], 1.0, &mut rng);
    let scores: Vec<f64> = (0..35).map(|_| rng.random()).collect();
    let (_, pack) = select(&map, &imp(5, 7, scores), 0.3).unwrap();
    let mut buf = Vec::new();
    pack.write_to(&mut buf).unwrap();
    assert_eq!(SparseFeaturePack::read_from(buf.as_slice()).unwrap(), pack);
    buf[0] = b'X';
    assert!(SparseFeaturePack::read_from(buf.as_slice()).is_err());
}

#[test]
fn shape_mismatch_rejected() {
    let map = Tensor::zeros(&[4, 4, 2]);
    assert!(select(&map, &imp(4, 3, vec![0.5; 12]), 0.5).is_err());
    let (_, pack) = select(&map, &imp(4, 4, vec![0.5; 16]), 0.5).unwrap();
    assert!(scatter(&pack, &Tensor::zeros(&[3, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn selection_properties(
        h in 1usize..12,
        w in 1usize..12,
        seed in any::<u64>(),
        l1 in 0.001f64..1.0,
        l2 in 0.001f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = tied_scores(h * w, &mut rng);
        let map = Tensor::randn(&[h, w, 2], 1.0, &mut rng);
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (masked, small) = select(&map, &imp(h, w, scores.clone()), lo).unwrap();
        let (_, large) = select(&map, &imp(h, w, scores.clone()), hi).unwrap();
        let want = lo * (h * w) as f64;
        let k = small.k() as f64;
        prop_assert!(k >= want - 1e-6 && k - 1.0 < want, "K {} for lambda*HW {}", k, want);
        prop_assert!(small.indices.iter().all(|i| large.indices.contains(i)));
        prop_assert!(small.indices.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(&small.indices, &oracle_selected(&scores, small.k()));
        prop_assert_eq!(scatter(&small, &small.features).unwrap(), masked);
        let again = select(&map, &imp(h, w, scores), lo).unwrap().1;
        prop_assert_eq!(again, small);
    }
}
