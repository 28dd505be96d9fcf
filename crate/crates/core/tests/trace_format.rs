mod common;

use circuitscope::trace::{decode, encode, read_trace, write_trace, RecordKind, TraceFile, TraceFilter, TraceHeader};
use common::traces::{bit_identical, checked_positions, random_file, random_record};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_random_records_round_trip_through_disk() {
    let file = random_file(11, 1000, 256);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dtrc");
    let size = write_trace(&file, &path).unwrap();
    assert_eq!(size, std::fs::metadata(&path).unwrap().len());
    let back = read_trace(&path).unwrap();
    assert!(bit_identical(&file, &back));
    for r in back.records.iter().filter(|r| r.kind == RecordKind::Attention) {
        r.validate().unwrap();
    }
    let again = dir.path().join("u.dtrc");
    write_trace(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn every_single_byte_corruption_is_rejected() {
    let file = random_file(5, 12, 32);
    let bytes = encode(&file).unwrap();
    let mut missed = Vec::new();
    for pos in checked_positions(bytes.len()) {
        for flip in [0x01u8, 0x80, 0xFF] {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            if decode(&bad).is_ok() {
                missed.push((pos, flip));
            }
        }
    }
    assert!(missed.is_empty(), "undetected corruptions: {missed:?}");
}

#[test]
fn truncation_anywhere_is_an_error() {
    let bytes = encode(&random_file(6, 5, 16)).unwrap();
    for cut in 0..bytes.len() {
        assert!(decode(&bytes[..cut]).is_err(), "truncation at {cut} accepted");
    }
}

#[test]
fn head_filters_partition_attention_records() {
    let file = random_file(8, 400, 64);
    let attention = file.query(&TraceFilter::kind(RecordKind::Attention));
    let mut union = Vec::new();
    for h in 0..8u16 {
        let part = file.query(&TraceFilter::kind(RecordKind::Attention).with_head(h));
        assert!(part.iter().all(|r| r.head == h));
        union.extend(part);
    }
    assert_eq!(union.len(), attention.len());
    let t = file.query(&TraceFilter::default().with_timesteps(&[20, 60, 120, 180]));
    assert_eq!(t.len(), file.records.len());
    assert!(file.query(&TraceFilter::default().with_timesteps(&[7])).is_empty());
    let named = file.query(&TraceFilter::default().with_name("mid"));
    let pos: Vec<usize> = named
        .iter()
        .map(|r| file.records.iter().position(|x| std::ptr::eq(x, *r)).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn empty_file_round_trips() {
    let f = TraceFile::new(TraceHeader::default(), Vec::new());
    let back = decode(&encode(&f).unwrap()).unwrap();
    assert!(bit_identical(&f, &back));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_records_round_trip(seed in any::<u64>(), n in 0usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<_> = (0..n).map(|_| random_record(&mut rng, 4096)).collect();
        let f = TraceFile::new(TraceHeader { seed, config_digest: [7; 32] }, records);
        let back = decode(&encode(&f).unwrap()).unwrap();
        prop_assert!(bit_identical(&f, &back));
    }
}
