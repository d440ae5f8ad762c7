use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spores::transfer::{build_file_descriptor, ReceiverState, SenderState, TransferMessage};
use std::collections::BTreeMap;

struct Outcome {
    file: Option<Vec<u8>>,
    elapsed: f64,
    acks_valid: bool,
}

/// Runs both ends over a channel that drops each message independently and
/// optionally corrupts chunks, with a fixed one-way latency.
fn run(seed: u64, size: usize, chunk: u32, drop: f64, corrupt: f64) -> (Vec<u8>, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; size];
    rng.fill(&mut data[..]);
    let fd = build_file_descriptor(&data, chunk, &mut rng).unwrap();
    let mut tx = SenderState::new(fd.clone(), data.clone(), 8, 4.0).unwrap();
    let mut rx = ReceiverState::new(fd);
    let latency = 0.25;
    let mut now = 0.0;
    // Messages in flight, keyed by (arrival time in ms, sequence).
    let mut wire: BTreeMap<(u64, u64), Vec<u8>> = BTreeMap::new();
    let mut seq = 0u64;
    let mut acks_valid = true;
    let mut valid_seen = std::collections::HashSet::new();
    while !tx.is_complete() && now < 1e5 {
        for c in tx.sender_step(now) {
            if rng.random_bool(drop) {
                continue;
            }
            let mut bytes = TransferMessage::Chunk(c).encode();
            if rng.random_bool(corrupt) {
                let i = rng.random_range(24..bytes.len());
                bytes[i] ^= 0x5a;
            }
            wire.insert((((now + latency) * 1000.0) as u64, seq), bytes);
            seq += 1;
        }
        let next_deadline = tx.next_deadline().unwrap_or(f64::INFINITY);
        let Some(&key) = wire.keys().next() else {
            now = next_deadline;
            continue;
        };
        let at = key.0 as f64 / 1000.0;
        if at > next_deadline {
            now = next_deadline;
            continue;
        }
        now = at;
        let bytes = wire.remove(&key).unwrap();
        match TransferMessage::decode(&bytes).unwrap() {
            TransferMessage::Chunk(c) => {
                if rx.fd().chunk_matches(c.index, &c.bytes) {
                    valid_seen.insert(c.index);
                }
                if let Some(ack) = rx.receiver_step(&c) {
                    acks_valid &= valid_seen.contains(&ack.index);
                    if !rng.random_bool(drop) {
                        wire.insert((((now + latency) * 1000.0) as u64, seq), TransferMessage::Ack(ack).encode());
                        seq += 1;
                    }
                }
            }
            TransferMessage::Ack(a) => {
                tx.on_ack(&a);
            }
        }
    }
    (data, Outcome { file: rx.assemble(), elapsed: now, acks_valid })
}

#[test]
fn hundred_chunks_over_half_lossy_channel() {
    for seed in 0..20 {
        let (data, out) = run(seed, 100 * 64, 64, 0.5, 0.0);
        assert_eq!(out.file.as_deref(), Some(&data[..]), "seed {seed}");
        assert!(out.acks_valid);
        assert!(out.elapsed.is_finite() && out.elapsed < 1e4);
    }
}

#[test]
fn corrupted_chunks_are_retransmitted() {
    let (data, out) = run(7, 100 * 64, 64, 0.1, 0.2);
    assert_eq!(out.file.unwrap(), data);
    assert!(out.acks_valid);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_shape_reassembles_exactly(
        seed in any::<u64>(),
        size in 0usize..4000,
        chunk in 1u32..300,
        drop in 0.0f64..0.5,
    ) {
        let (data, out) = run(seed, size, chunk, drop, 0.05);
        prop_assert_eq!(out.file, Some(data));
        prop_assert!(out.acks_valid);
    }
}
