use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::EncoderConfig;

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    normalized(&v).unwrap()
}

fn random_index(n: usize, dim: usize, m: usize, seed: u64) -> (LatentIndex, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HnswParams::with_m(m);
    params.seed = seed;
    let mut index = LatentIndex::new(dim, params).unwrap();
    let mut vecs = Vec::new();
    for i in 0..n {
        let v = random_unit(&mut rng, dim);
        index.insert(&format!("k{i:05}"), &v).unwrap();
        vecs.push(v);
    }
    (index, vecs)
}

/// Counts forward calls; embeds a token as its per-letter histogram.
struct CountingEmbedder {
    calls: Cell<usize>,
}

impl TokenEmbedder for CountingEmbedder {
    fn embed(&self, batch: &[CharSeq]) -> Result<Matrix<f32>, EncoderError> {
        self.calls.set(self.calls.get() + 1);
        let mut m = Matrix::zeros(batch.len(), 31);
        for (r, seq) in batch.iter().enumerate() {
            for &id in &seq.ids()[..seq.true_len()] {
                m.row_mut(r)[id as usize] += 1.0;
            }
        }
        Ok(m)
    }
}

#[test]
fn first_insert_becomes_entry_point() {
    let mut index = LatentIndex::new(3, HnswParams::default()).unwrap();
    assert_eq!(index.entry_point(), None);
    let id = index.insert("a", &[1.0, 2.0, 2.0]).unwrap();
    assert_eq!(index.entry_point(), Some(id));
    let e = index.entries().next().unwrap();
    assert_eq!(e.key_token, "a");
    let want = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
    for (a, b) in e.vector.iter().zip(want) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn degree_is_capped_and_graph_is_consistent() {
    let (index, _) = random_index(300, 8, 4, 5);
    index.check_integrity().unwrap();
    for e in index.entries() {
        assert!(e.level <= index.entries().map(|x| x.level).max().unwrap());
    }
}

#[test]
fn integrity_holds_after_every_insert() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut index = LatentIndex::new(6, HnswParams::with_m(3)).unwrap();
    for i in 0..150 {
        index.insert(&i.to_string(), &random_unit(&mut rng, 6)).unwrap();
        index.check_integrity().unwrap_or_else(|e| panic!("after insert {i}: {e}"));
    }
}

#[test]
fn rejects_duplicates_zero_vectors_and_wrong_dimension() {
    let mut index = LatentIndex::new(2, HnswParams::default()).unwrap();
    index.insert("x", &[1.0, 0.0]).unwrap();
    assert!(matches!(index.insert("x", &[0.0, 1.0]), Err(IndexError::DuplicateKey(_))));
    assert!(matches!(index.insert("y", &[0.0, 0.0]), Err(IndexError::ZeroVector)));
    assert!(matches!(
        index.insert("y", &[1.0, 0.0, 0.0]),
        Err(IndexError::Dimension { expected: 2, got: 3 })
    ));
    assert_eq!(index.len(), 1);
}

#[test]
fn empty_index_errors_and_never_matches() {
    let index = LatentIndex::new(2, HnswParams::default()).unwrap();
    assert!(matches!(index.search(&[1.0, 0.0], 1), Err(IndexError::EmptyIndex)));
    assert_eq!(index.match_vector(&[1.0, 0.0], 0.0).unwrap(), None);
}

#[test]
fn exact_vector_scores_one() {
    let (index, vecs) = random_index(200, 16, 8, 1);
    for (i, v) in vecs.iter().enumerate().step_by(17) {
        let hit = &index.search(v, 1).unwrap()[0];
        assert_eq!(hit.key, format!("k{i:05}"));
        assert!((hit.sim - 1.0).abs() < 1e-5);
    }
}

#[test]
fn k_larger_than_index_returns_everything_sorted() {
    let (index, vecs) = random_index(10, 4, 4, 2);
    let hits = index.search(&vecs[3], 50).unwrap();
    assert_eq!(hits.len(), 10);
    assert!(hits.windows(2).all(|w| w[0].sim >= w[1].sim));
}

#[test]
fn orthogonal_keys() {
    let mut index = LatentIndex::new(3, HnswParams::default()).unwrap();
    index.insert("x", &[2.0, 0.0, 0.0]).unwrap();
    index.insert("y", &[0.0, 3.0, 0.0]).unwrap();
    index.insert("z", &[0.0, 0.0, 0.5]).unwrap();
    let hits = index.search(&[1.0, 1.0, 0.0], 3).unwrap();
    assert_eq!(hits[0].key, "x");
    assert_eq!(hits[1].key, "y");
    assert!((hits[0].sim - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    assert_eq!(hits[2].key, "z");
    assert!(hits[2].sim.abs() < 1e-7);
}

#[test]
fn threshold_is_inclusive() {
    let mut index = LatentIndex::new(2, HnswParams::default()).unwrap();
    index.insert("k", &[1.0, 0.0]).unwrap();
    let q = [0.8, 0.6];
    let sim = index.search(&q, 1).unwrap()[0].sim;
    assert_eq!(index.match_vector(&q, sim).unwrap().unwrap().key, "k");
    assert_eq!(index.match_vector(&q, sim + 1e-6).unwrap(), None);
    assert_eq!(index.match_vector(&[0.0, 0.0], -1.0).unwrap(), None);
}

#[test]
fn recall_at_one_is_high() {
    let (index, _) = random_index(2000, 16, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let queries = 200;
    let mut agree = 0;
    for _ in 0..queries {
        let q = random_unit(&mut rng, 16);
        if index.search(&q, 1).unwrap()[0].key == index.exact_search(&q, 1).unwrap()[0].key {
            agree += 1;
        }
    }
    assert!(agree as f64 / queries as f64 >= 0.95, "recall {agree}/{queries}");
}

#[test]
fn insert_token_embeds_once_and_build_batches() {
    let emb = CountingEmbedder { calls: Cell::new(0) };
    let mut index = LatentIndex::build(["fuck", "shit"], &emb, 31, HnswParams::default()).unwrap();
    assert_eq!(emb.calls.get(), 1);
    index.insert_token("bitch", &emb).unwrap();
    assert_eq!(emb.calls.get(), 2);
    assert!(index.contains("bitch"));
    assert!(matches!(index.insert_token("shit", &emb), Err(IndexError::DuplicateKey(_))));
    assert_eq!(emb.calls.get(), 2);
    let hit = index.match_token("bitch", &emb, 0.99).unwrap().unwrap();
    assert_eq!(hit.key, "bitch");
}

#[test]
fn encoder_implements_embedder() {
    let params = EncoderParams::<f32>::init(EncoderConfig::tiny(), 3).unwrap();
    let dim = params.config().proj_dim;
    let index = LatentIndex::build(["abc", "xyz"], &params, dim, HnswParams::default()).unwrap();
    assert_eq!(index.len(), 2);
}

#[test]
fn save_load_round_trip() {
    let (index, vecs) = random_index(120, 8, 4, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("keys.idx");
    index.save(&path, 0xabcd).unwrap();
    let (back, fp) = LatentIndex::load(&path).unwrap();
    assert_eq!(fp, 0xabcd);
    assert_eq!(back, index);
    assert_eq!(back.search(&vecs[5], 3).unwrap(), index.search(&vecs[5], 3).unwrap());
    assert!(LatentIndex::load_for(&path, 0xabcd).is_ok());
    assert!(matches!(
        LatentIndex::load_for(&path, 1),
        Err(IndexError::StaleIndex { expected: 1, found: 0xabcd })
    ));
}

#[test]
fn truncated_index_file_is_rejected() {
    let (index, _) = random_index(20, 4, 4, 8);
    let bytes = index.to_container(1).to_bytes();
    for cut in [4, bytes.len() / 2, bytes.len() - 1] {
        let r = crate::container::Container::from_bytes(&bytes[..cut], INDEX_MAGIC);
        assert!(r.is_err());
    }
}

#[test]
fn levels_are_reproducible() {
    let (a, _) = random_index(100, 4, 4, 11);
    let (b, _) = random_index(100, 4, 4, 11);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Up to `M` entries the graph is complete on layer 0, so search is exact.
    #[test]
    fn matches_exact_search_when_small(seed in any::<u64>(), n in 1usize..=8) {
        let (index, _) = random_index(n, 5, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = random_unit(&mut rng, 5);
        prop_assert_eq!(index.search(&q, n).unwrap(), index.exact_search(&q, n).unwrap());
    }

    /// The approximate top hit can never beat the exact one.
    #[test]
    fn exact_search_dominates(seed in any::<u64>()) {
        let (index, _) = random_index(150, 6, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let q = random_unit(&mut rng, 6);
        let approx = &index.search(&q, 1).unwrap()[0];
        let exact = &index.exact_search(&q, 1).unwrap()[0];
        prop_assert!(approx.sim <= exact.sim + 1e-6);
    }

    #[test]
    fn graph_stays_valid(seed in any::<u64>(), n in 1usize..80, m in 2usize..6) {
        let (index, _) = random_index(n, 4, m, seed);
        prop_assert!(index.check_integrity().is_ok(), "{:?}", index.check_integrity());
    }
}
