use eaid::codec::{decode, encode, partition, CodecError, CodingParams, Fragment, MessageId};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = include_str!("fixtures/golden_n3_f1.hex");

#[test]
fn golden_vectors_n3_f1() {
    let params = CodingParams::new(3, 1).unwrap();
    let frags = encode(MessageId(7), b"eaid golden!", &params).unwrap();
    let expected: Vec<(u16, Vec<u8>)> = GOLDEN
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (idx, data) = l.split_once(' ').unwrap();
            (idx.parse().unwrap(), hex::decode(data).unwrap())
        })
        .collect();
    assert_eq!(expected.len(), frags.len());
    for (frag, (idx, data)) in frags.iter().zip(&expected) {
        assert_eq!(frag.index, *idx);
        assert_eq!(&frag.data, data, "fragment {idx}");
        assert_eq!(frag.original_length, 12);
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    go(0, n, k, &mut cur, &mut out);
    out
}

#[test]
fn every_subset_decodes_at_five_nodes() {
    let params = CodingParams::new(5, 2).unwrap();
    let msg: Vec<u8> = (0..301u32).map(|i| (i * 97 % 251) as u8).collect();
    let frags = encode(MessageId(1), &msg, &params).unwrap();
    for subset in subsets(15, 3) {
        let chosen: Vec<Fragment> = subset.iter().map(|&i| frags[i].clone()).collect();
        assert_eq!(decode(&chosen, &params).unwrap(), msg, "subset {subset:?}");
    }
}

#[test]
fn two_hundred_random_subsets_at_eleven_nodes() {
    let params = CodingParams::new(11, 5).unwrap();
    let msg: Vec<u8> = (0..1000u32).map(|i| (i * 13 + 5) as u8).collect();
    let frags = encode(MessageId(4), &msg, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let chosen: Vec<Fragment> = sample(&mut rng, frags.len(), 6)
            .into_iter()
            .map(|i| frags[i].clone())
            .collect();
        assert_eq!(decode(&chosen, &params).unwrap(), msg);
    }
}

#[test]
fn f_fragments_are_insufficient() {
    let params = CodingParams::new(7, 3).unwrap();
    let frags = encode(MessageId(0), b"short", &params).unwrap();
    assert_eq!(
        decode(&frags[10..13], &params),
        Err(CodecError::InsufficientFragments { have: 3, need: 4 })
    );
}

#[test]
fn fragments_survive_the_wire() {
    let params = CodingParams::new(5, 2).unwrap();
    let frags = encode(MessageId(u64::MAX), b"over the wire", &params).unwrap();
    let back: Vec<Fragment> = frags
        .iter()
        .map(|f| Fragment::from_bytes(&f.to_bytes()).unwrap())
        .collect();
    assert_eq!(back, frags);
}

#[test]
fn fragments_of_distinct_nodes_are_disjoint() {
    let params = CodingParams::new(7, 3).unwrap();
    let assignment = partition(&params);
    for a in 0..7 {
        for b in (a + 1)..7 {
            let (x, y) = (assignment.block(a), assignment.block(b));
            assert!(x.end <= y.start || y.end <= x.start);
        }
    }
}

proptest! {
    #[test]
    fn encode_is_deterministic(msg in proptest::collection::vec(any::<u8>(), 1..400)) {
        let params = CodingParams::new(5, 2).unwrap();
        prop_assert_eq!(
            encode(MessageId(3), &msg, &params).unwrap(),
            encode(MessageId(3), &msg, &params).unwrap()
        );
    }

    #[test]
    fn any_k_distinct_fragments_roundtrip(
        msg in proptest::collection::vec(any::<u8>(), 1..300),
        f in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let params = CodingParams::for_faults(f).unwrap();
        let frags = encode(MessageId(seed), &msg, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<Fragment> = sample(&mut rng, frags.len(), f + 1)
            .into_iter()
            .map(|i| frags[i].clone())
            .collect();
        prop_assert_eq!(decode(&chosen, &params).unwrap(), msg);
    }

    #[test]
    fn storage_is_n_times_shard_len(len in 1usize..2000, f in 1usize..=7) {
        let params = CodingParams::for_faults(f).unwrap();
        let frags = encode(MessageId(0), &vec![1u8; len], &params).unwrap();
        let total: usize = frags.iter().map(|x| x.data.len()).sum();
        prop_assert_eq!(total, params.n_nodes() * (f + 1) * len.div_ceil(f + 1));
    }
}
